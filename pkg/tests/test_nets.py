#!/usr/bin/env python3
"""
Test networks, the low-rank parametrization, hard constraints and the
hypernetwork composition
"""
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from autodiff import jet_seed  # noqa: E402
from nets import (  # noqa: E402
    ABLATION_TARGETS,
    ConstraintConfig,
    ConstraintMode,
    DensePinnModel,
    HypernetSpec,
    LowRankMlpSpec,
    MlpSpec,
    NprModel,
    decode_params,
    dense_param_count,
    encode_params,
    forward,
    hard_bc,
    hard_bc_two_sided,
    hard_ic,
    init_params,
    layout,
    lowrank_param_count,
    npr_eval,
    stack_inputs,
    unfold_lowrank,
)
from problems import Equation, IbvpSpec, ICBatch, ICSample, eval_ic  # noqa: E402

# (hidden, rank) -> (# target, # hyper) for 32 sensors
EXPECTED_COUNTS = {
    (32, 4): (993, 79137),
    (32, 8): (1761, 129057),
    (32, 16): (3297, 228897),
    (64, 4): (1985, 143617),
    (64, 8): (3521, 243457),
    (64, 16): (6593, 443137),
}


def small_spec() -> HypernetSpec:
    return HypernetSpec.build(d_enc=8, hyper_layers=2, hyper_hidden=16,
                              target_layers=3, target_hidden=8, rank=2)


def test_dense_param_count():
    assert dense_param_count(MlpSpec(d_input=2, d_output=1, n_hidden=4, d_hidden=32)) == 3297
    assert dense_param_count(MlpSpec(d_input=1, d_output=1, n_hidden=1, d_hidden=1)) == 4
    assert dense_param_count(MlpSpec(d_input=32, d_output=993, n_hidden=4, d_hidden=64)) == 79137


@pytest.mark.parametrize("hidden,rank", ABLATION_TARGETS)
def test_table_counts(hidden, rank):
    spec = HypernetSpec.build(target_hidden=hidden, rank=rank)
    target, hyper = EXPECTED_COUNTS[(hidden, rank)]
    assert lowrank_param_count(spec.target) == target
    assert dense_param_count(spec.hyper) == hyper
    assert NprModel(spec).param_count() == hyper


def test_layout_sizes_add_up():
    spec = small_spec()
    assert sum(block.size for block in layout(spec.target)) == lowrank_param_count(spec.target)
    names = [block.name for block in layout(spec.target)]
    assert names == ["W0", "b0", "A1", "B1", "b1", "A2", "B2", "b2", "W_out", "b_out"]


def test_rank_cannot_exceed_hidden():
    base = MlpSpec(d_input=2, d_output=1, n_hidden=2, d_hidden=4)
    with pytest.raises(ValidationError):
        LowRankMlpSpec(base=base, rank=5)


def test_hypernet_output_must_match_target():
    target = LowRankMlpSpec(base=MlpSpec(d_input=2, d_output=1, n_hidden=2, d_hidden=4), rank=2)
    hyper = MlpSpec(d_input=8, d_output=10, n_hidden=1, d_hidden=4)
    with pytest.raises(ValidationError):
        HypernetSpec(hyper=hyper, target=target)


def test_zero_params_give_zero_output():
    spec = small_spec().target
    out = forward(spec, np.zeros(lowrank_param_count(spec)), np.random.default_rng(0).uniform(size=(5, 2)))
    np.testing.assert_array_equal(out, np.zeros((5, 1)))


def test_identity_sized_net():
    spec = MlpSpec(d_input=1, d_output=1, n_hidden=1, d_hidden=1)
    # w=1, b=0 in both layers: sin(0) = 0
    assert forward(spec, np.array([1.0, 0.0, 1.0, 0.0]), np.array([0.0]))[0] == 0.0


def test_decode_rejects_wrong_length():
    spec = small_spec().target
    with pytest.raises(ValueError, match="length"):
        decode_params(np.zeros(lowrank_param_count(spec) + 1), spec)


def test_encode_decode_round_trip():
    spec = small_spec().target
    flat = np.random.default_rng(1).normal(size=lowrank_param_count(spec))
    np.testing.assert_array_equal(encode_params(decode_params(flat, spec)), flat)


def test_lowrank_matches_materialized_dense():
    spec = small_spec().target
    rng = np.random.default_rng(2)
    flat = rng.normal(size=lowrank_param_count(spec))
    dense_spec, dense_flat = unfold_lowrank(flat, spec)
    assert dense_flat.size == dense_param_count(dense_spec)
    inputs = rng.uniform(size=(100, 2))
    np.testing.assert_allclose(forward(spec, flat, inputs), forward(dense_spec, dense_flat, inputs),
                               rtol=0, atol=1e-12)


def test_batched_params_match_single_networks():
    spec = small_spec().target
    rng = np.random.default_rng(3)
    flats = rng.normal(size=(4, lowrank_param_count(spec)))
    inputs = rng.uniform(size=(4, 2))
    batched = forward(spec, flats, inputs)
    for i in range(4):
        np.testing.assert_allclose(batched[i], forward(spec, flats[i], inputs[i]), rtol=0, atol=1e-12)


def test_init_params_scales_output_layer():
    spec = MlpSpec(d_input=2, d_output=3, n_hidden=2, d_hidden=8)
    full = init_params(spec, np.random.default_rng(4))
    scaled = init_params(spec, np.random.default_rng(4), output_scale=0.01)
    net_full, net_scaled = decode_params(full, spec), decode_params(scaled, spec)
    np.testing.assert_allclose(net_scaled.layers[-1].weight, 0.01 * net_full.layers[-1].weight)
    np.testing.assert_array_equal(net_scaled.layers[0].weight, net_full.layers[0].weight)
    assert not np.any(net_full.layers[0].bias)


def test_hard_ic():
    assert hard_ic(7.0, 4.0, 0.0, 1.0) == 4.0
    assert hard_ic(7.0, 4.0, 1.0, 1.0) == 7.0
    assert hard_ic(2.0, 4.0, 0.25, 1.0) == pytest.approx(3.5)


def test_hard_bc():
    beta = ConstraintConfig().beta
    assert hard_bc(5.0, 2.0, 0.0, beta) == 2.0
    assert hard_bc(5.0, 2.0, 1.0, beta) == 5.0
    assert hard_bc(1.0, 3.0, 0.3, lambda x: 0.5) == 2.0


def test_hard_bc_two_sided():
    assert hard_bc_two_sided(9.0, 0.0, 1.5, -2.0) == 1.5
    assert hard_bc_two_sided(9.0, 1.0, 1.5, -2.0) == -2.0
    assert hard_bc_two_sided(4.0, 0.5, 0.0, 0.0) == pytest.approx(1.0)


def test_stack_inputs_broadcasts():
    out = stack_inputs(np.zeros((3, 1)), np.ones(4))
    assert out.shape == (3, 4, 2)
    with pytest.raises(TypeError):
        stack_inputs(jet_seed(0.0), 1.0)


@pytest.fixture
def heat_instance():
    spec = small_spec()
    params = np.random.default_rng(5).normal(scale=0.5, size=dense_param_count(spec.hyper))
    ic = ICSample.fourier(0.3, [1.0], [0.5])
    u0 = ICBatch.from_samples([ic])
    constraints = ConstraintConfig.for_problem(IbvpSpec(equation=Equation.HEAT))
    return spec, params, ic, u0, constraints


def test_npr_eval_reproduces_initial_condition(heat_instance):
    spec, params, ic, u0, constraints = heat_instance
    x = np.linspace(0.0, 1.0, 11)
    out = npr_eval(params, u0.discretize(spec.d_enc), np.zeros_like(x), x, constraints, u0, spec)
    np.testing.assert_allclose(out, eval_ic(ic, x), rtol=0, atol=1e-15)


def test_npr_eval_holds_boundary_values(heat_instance):
    spec, params, ic, u0, constraints = heat_instance
    t = np.linspace(0.0, 1.0, 7)
    sensors = u0.discretize(spec.d_enc)
    left = npr_eval(params, sensors, t, np.zeros_like(t), constraints, u0, spec)
    right = npr_eval(params, sensors, t, np.ones_like(t), constraints, u0, spec)
    np.testing.assert_allclose(left, eval_ic(ic, 0.0), atol=1e-14)
    np.testing.assert_allclose(right, eval_ic(ic, 1.0), atol=1e-14)


def test_npr_eval_matches_manual_composition(heat_instance):
    spec, params, ic, u0, constraints = heat_instance
    rng = np.random.default_rng(6)
    t, x = rng.uniform(size=20), rng.uniform(size=20)
    sensors = u0.discretize(spec.d_enc)

    theta = forward(spec.hyper, params, sensors)[0]
    raw = forward(spec.target, theta, np.stack([t, x], axis=-1))[:, 0]
    u_left, u_right = eval_ic(ic, 0.0), eval_ic(ic, 1.0)
    bounded = raw * x * (1 - x) + (1 - x) * u_left + x * u_right
    expected = t * bounded + (1 - t) * eval_ic(ic, x)

    out = npr_eval(params, sensors, t, x, constraints, u0, spec)
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_theta_depends_only_on_sensors(heat_instance):
    spec, params, ic, u0, _ = heat_instance
    model = NprModel(spec)
    sensors = u0.discretize(spec.d_enc)
    np.testing.assert_array_equal(model.regress(params, sensors), model.regress(params, sensors))
    with pytest.raises(ValueError, match="sensors"):
        model.regress(params, np.zeros((1, spec.d_enc + 1)))


def test_batched_bind_pairs_rows_with_points(heat_instance):
    spec, params, _, _, _ = heat_instance
    model = NprModel(spec)
    rng = np.random.default_rng(8)
    sensors = rng.normal(size=(3, spec.d_enc))
    t, x = rng.uniform(size=3), rng.uniform(size=3)
    batched = model.bind(params, sensors)(t, x)
    for i in range(3):
        single = model.bind(params, sensors[i:i + 1])(t[i], x[i])
        assert batched[i] == pytest.approx(float(single), abs=1e-12)


def test_soft_constraints_leave_raw_output(heat_instance):
    spec, params, _, u0, _ = heat_instance
    soft = ConstraintConfig(ic_mode=ConstraintMode.SOFT, bc_mode=ConstraintMode.SOFT)
    sensors = u0.discretize(spec.d_enc)
    t, x = np.array([0.0, 0.5]), np.array([0.0, 0.25])
    raw = NprModel(spec).bind(params, sensors)(t, x)
    np.testing.assert_array_equal(npr_eval(params, sensors, t, x, soft, u0, spec), raw)


def test_burgers_constraints_use_left_boundary_only():
    constraints = ConstraintConfig.for_problem(IbvpSpec(equation=Equation.BURGERS))
    spec = small_spec()
    params = np.random.default_rng(9).normal(size=dense_param_count(spec.hyper))
    ic = ICSample.affine(-0.5, 1.5)
    u0 = ICBatch.from_samples([ic])
    t = np.linspace(0.0, 1.0, 5)
    left = npr_eval(params, u0.discretize(spec.d_enc), t, np.zeros_like(t), constraints, u0, spec)
    np.testing.assert_allclose(left, 1.5, atol=1e-14)


def test_dense_pinn_ignores_sensors():
    spec = MlpSpec(d_input=2, d_output=1, n_hidden=2, d_hidden=4)
    model = DensePinnModel(spec, d_enc=8)
    params = model.init_params(np.random.default_rng(10))
    field_a = model.bind(params, np.zeros((1, 8)))
    field_b = model.bind(params, np.ones((1, 8)))
    assert field_a(0.3, 0.4) == field_b(0.3, 0.4)
    assert model.param_count() == dense_param_count(spec)
