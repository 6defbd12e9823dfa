#!/usr/bin/env python3
"""
Test the DeepONet baseline
"""
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from deeponet import DeepONetModel, DeepONetSpec, deeponet_eval, deeponet_param_counts  # noqa: E402
from nets import ConstraintConfig, MlpSpec, dense_param_count, forward, stack_inputs  # noqa: E402
from problems import Equation, IbvpSpec, ICBatch, ICSample, SamplerConfig, eval_ic  # noqa: E402
from training import LossKind, draw_pde_batch, loss_pde  # noqa: E402


def small_spec() -> DeepONetSpec:
    return DeepONetSpec.build(d_enc=8, p_lat=6, branch_layers=2, branch_hidden=10,
                              trunk_layers=2, trunk_hidden=7)


def test_heat_baseline_counts():
    spec = DeepONetSpec.build(branch_hidden=64, trunk_hidden=32)
    assert deeponet_param_counts(spec) == (4320, 16672)


def test_burgers_baseline_counts():
    spec = DeepONetSpec.build(branch_hidden=128, trunk_hidden=64)
    assert deeponet_param_counts(spec) == (14752, 57888)


def test_latent_sizes_must_agree():
    with pytest.raises(ValidationError):
        DeepONetSpec(branch=MlpSpec(d_input=8, d_output=4, n_hidden=1, d_hidden=4),
                     trunk=MlpSpec(d_input=2, d_output=5, n_hidden=1, d_hidden=4))
    with pytest.raises(ValidationError):
        DeepONetSpec(branch=MlpSpec(d_input=8, d_output=4, n_hidden=1, d_hidden=4),
                     trunk=MlpSpec(d_input=3, d_output=4, n_hidden=1, d_hidden=4))


def test_zero_branch_gives_zero_output():
    spec = small_spec()
    model = DeepONetModel(spec)
    params = model.init_params(np.random.default_rng(0))
    params[:dense_param_count(spec.branch)] = 0.0
    sensors = np.random.default_rng(1).normal(size=(1, 8))
    t, x = np.meshgrid(np.linspace(0, 1, 4), np.linspace(0, 1, 5), indexing="ij")
    np.testing.assert_array_equal(model.bind(params, sensors)(t, x), np.zeros((4, 5)))


def test_matches_manual_dot_product():
    spec = small_spec()
    model = DeepONetModel(spec)
    rng = np.random.default_rng(2)
    params = rng.normal(size=model.param_count())
    sensors = rng.normal(size=(1, 8))
    t, x = rng.uniform(size=12), rng.uniform(size=12)

    branch, trunk = model.split(params)
    coefficients = forward(spec.branch, branch, sensors)[0]
    basis = forward(spec.trunk, trunk, stack_inputs(t, x))
    np.testing.assert_allclose(model.bind(params, sensors)(t, x), basis @ coefficients, rtol=1e-12, atol=1e-12)


def test_batched_sensors_pair_with_points():
    spec = small_spec()
    model = DeepONetModel(spec)
    rng = np.random.default_rng(3)
    params = rng.normal(size=model.param_count())
    sensors = rng.normal(size=(3, 8))
    t, x = rng.uniform(size=3), rng.uniform(size=3)
    batched = model.bind(params, sensors)(t, x)
    for i in range(3):
        single = model.bind(params, sensors[i:i + 1])(t[i:i + 1], x[i:i + 1])
        assert batched[i] == pytest.approx(float(single[0]), abs=1e-12)


def test_split_rejects_wrong_length():
    model = DeepONetModel(small_spec())
    with pytest.raises(ValueError, match="length"):
        model.split(np.zeros(model.param_count() - 1))


def test_hard_constraints_hold_for_baseline():
    spec = small_spec()
    params = DeepONetModel(spec).init_params(np.random.default_rng(4))
    ic = ICSample.fourier(0.5, [1.0], [-0.3])
    u0 = ICBatch.from_samples([ic])
    constraints = ConstraintConfig.for_problem(IbvpSpec(equation=Equation.HEAT))
    x = np.linspace(0, 1, 9)
    out = deeponet_eval(params, u0.discretize(8), np.zeros_like(x), x, spec, constraints, u0)
    np.testing.assert_allclose(out, eval_ic(ic, x), atol=1e-15)
    with pytest.raises(ValueError):
        deeponet_eval(params, u0.discretize(8), x, x, spec, constraints)


def test_baseline_trains_through_shared_losses():
    spec = small_spec()
    model = DeepONetModel(spec)
    params = model.init_params(np.random.default_rng(5))
    problem = IbvpSpec(equation=Equation.HEAT)
    batch = draw_pde_batch(problem, SamplerConfig(), 8, 8, np.random.default_rng(6))
    loss = loss_pde(model, params, batch, problem, ConstraintConfig.for_problem(problem), LossKind.MAE)
    assert np.isfinite(float(loss))
