#!/usr/bin/env python3
"""
Test loss components, loss balancing, the learning-rate schedule, Adam and
the training loop
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from autodiff import value_and_grad  # noqa: E402
from checkpoint import ModelKind  # noqa: E402
from nets import ConstraintConfig, ConstraintMode, HypernetSpec, NprModel  # noqa: E402
from problems import BoundaryKind, Equation, IbvpSpec, ICBatch, ICSample, SamplerConfig  # noqa: E402
from training import (  # noqa: E402
    AdamState,
    CollocationBatch,
    DivergenceError,
    LossKind,
    LossWeights,
    TrainConfig,
    Trainer,
    active_components,
    adam_step,
    draw_bc_batch,
    draw_ic_batch,
    draw_pde_batch,
    loss_bc,
    loss_ic,
    loss_pde,
    lr_at,
    train,
    update_loss_weights,
)

HEAT = IbvpSpec(equation=Equation.HEAT)
BURGERS = IbvpSpec(equation=Equation.BURGERS)
SOFT = ConstraintConfig(ic_mode=ConstraintMode.SOFT, bc_mode=ConstraintMode.SOFT)


def tiny_model() -> NprModel:
    return NprModel(HypernetSpec.build(d_enc=8, hyper_layers=2, hyper_hidden=16,
                                       target_layers=2, target_hidden=8, rank=2))


def tiny_config(**changes) -> TrainConfig:
    base = dict(n_steps=4, batch_pde=16, batch_ic=8, batch_bc=8, log_every=1000)
    base.update(changes)
    return TrainConfig(**base)


def constant_batch(value: float, size: int, d_enc: int, rng) -> CollocationBatch:
    ics = ICBatch.from_samples([ICSample.affine(0.0, value)] * size)
    return CollocationBatch(ics, ics.discretize(d_enc), rng.uniform(size=size), rng.uniform(size=size))


def test_update_loss_weights_examples():
    weights = update_loss_weights({"pde": 1.0, "ic": 3.0})
    assert weights.lambda_pde == pytest.approx(4.0)
    assert weights.lambda_ic == pytest.approx(4.0 / 3.0)
    assert weights.lambda_bc == 0.0

    assert update_loss_weights({"pde": 7.0}).lambda_pde == pytest.approx(1.0)

    equal = update_loss_weights({"pde": 2.5, "ic": 2.5, "bc": 2.5})
    assert (equal.lambda_pde, equal.lambda_ic, equal.lambda_bc) == (3.0, 3.0, 3.0)


def test_zero_norm_keeps_previous_weight():
    previous = LossWeights(lambda_pde=2.0, lambda_ic=5.0, lambda_bc=0.0)
    weights = update_loss_weights({"pde": 1.0, "ic": 0.0}, previous)
    assert weights.lambda_pde == 1.0
    assert weights.lambda_ic == 5.0


def test_update_loss_weights_rejects_bad_norms():
    with pytest.raises(ValueError):
        update_loss_weights({"pde": 1.0, "data": 1.0})
    with pytest.raises(ValueError):
        update_loss_weights({"pde": -1.0})
    with pytest.raises(ValueError):
        update_loss_weights({"pde": float("nan")})


def test_initial_weights_follow_constraints():
    hard = LossWeights.initial(ConstraintConfig())
    assert (hard.lambda_pde, hard.lambda_ic, hard.lambda_bc) == (1.0, 0.0, 0.0)
    soft = LossWeights.initial(SOFT)
    assert (soft.lambda_pde, soft.lambda_ic, soft.lambda_bc) == (1.0, 1.0, 1.0)
    assert active_components(ConstraintConfig()) == ("pde",)
    assert active_components(SOFT) == ("pde", "ic", "bc")


def test_lr_schedule():
    cfg = TrainConfig(n_steps=1000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == pytest.approx(1e-3)
    assert lr_at(50, cfg) == pytest.approx(5e-4)
    assert lr_at(550, cfg) == pytest.approx(5e-4)
    assert lr_at(1000, cfg) == 0.0
    assert lr_at(5, TrainConfig(n_steps=0)) == 0.0


def test_adam_zero_gradient():
    params = np.array([1.0, -2.0])
    state, out = adam_step(AdamState.zeros(2), params, np.zeros(2), 1e-3)
    np.testing.assert_array_equal(out, params)
    assert state.step == 1
    np.testing.assert_array_equal(state.m, np.zeros(2))


def test_adam_first_step_moves_by_lr():
    params = np.array([1.0, -2.0, 0.5])
    g = np.array([0.5, -2.0, 1e-3])
    state, out = adam_step(AdamState.zeros(3), params, g, 1e-2)
    expected = params - 1e-2 * g / (np.abs(g) + state.eps)
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    np.testing.assert_allclose(out, params - 1e-2 * np.sign(g), atol=1e-6)


def test_adam_is_deterministic_and_pure():
    params = np.array([0.3, 0.4])
    g = np.array([1.0, -1.0])
    state = AdamState.zeros(2)
    a = adam_step(state, params, g, 1e-3)
    b = adam_step(state, params, g, 1e-3)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(params, [0.3, 0.4])


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(DivergenceError):
        adam_step(AdamState.zeros(1), np.zeros(1), np.array([np.nan]), 1e-3)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(2), np.zeros(1), np.zeros(1), 1e-3)


def test_batches_have_matching_sizes():
    rng = np.random.default_rng(0)
    pde = draw_pde_batch(HEAT, SamplerConfig(), 16, 8, rng)
    assert len(pde.ics) == pde.sensors.shape[0] == pde.t.size == pde.x.size == 16
    assert pde.sensors.shape == (16, 8)
    ic = draw_ic_batch(HEAT, SamplerConfig(), 8, 8, rng)
    np.testing.assert_array_equal(ic.t, 0.0)
    bc = draw_bc_batch(HEAT, SamplerConfig(), 32, 8, rng)
    assert set(np.unique(bc.x)) <= {0.0, 1.0}
    bc = draw_bc_batch(BURGERS, SamplerConfig(), 32, 8, rng)
    np.testing.assert_array_equal(bc.x, 0.0)
    assert BURGERS.bc_kind == BoundaryKind.DIRICHLET_LEFT


def test_hardcoded_ic_loss_is_zero():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(1))
    batch = draw_ic_batch(HEAT, SamplerConfig(), 16, model.d_enc, np.random.default_rng(2))
    constraints = ConstraintConfig.for_problem(HEAT)
    assert float(loss_ic(model, params, batch, constraints)) == 0.0


def test_soft_ic_loss_of_zero_model():
    model = tiny_model()
    params = np.zeros(model.param_count())
    batch = constant_batch(1.0, 16, model.d_enc, np.random.default_rng(3))
    assert float(loss_ic(model, params, batch, SOFT)) == pytest.approx(1.0)
    assert float(loss_ic(model, params, batch, SOFT, LossKind.MSE)) == pytest.approx(1.0)


def test_hardcoded_bc_loss_vanishes():
    model = tiny_model()
    params = model.init_params(np.random.default_rng(4))
    for problem in (HEAT, BURGERS):
        batch = draw_bc_batch(problem, SamplerConfig(), 16, model.d_enc, np.random.default_rng(5))
        constraints = ConstraintConfig.for_problem(problem)
        assert float(loss_bc(model, params, batch, problem, constraints)) == pytest.approx(0.0, abs=1e-12)


def test_soft_bc_loss_of_zero_model():
    model = tiny_model()
    params = np.zeros(model.param_count())
    ics = ICBatch.from_samples([ICSample.affine(-0.5, 1.5)] * 8)
    batch = CollocationBatch(ics, ics.discretize(model.d_enc), np.linspace(0, 1, 8), np.zeros(8))
    assert float(loss_bc(model, params, batch, BURGERS, SOFT)) == pytest.approx(1.5)


def test_constant_solution_has_zero_pde_loss():
    model = tiny_model()
    params = np.zeros(model.param_count())
    batch = constant_batch(1.3, 16, model.d_enc, np.random.default_rng(6))
    assert float(loss_pde(model, params, batch, BURGERS, SOFT)) == 0.0


def test_pde_loss_gradient_matches_finite_differences():
    model = tiny_model()
    params = np.random.default_rng(7).normal(scale=0.5, size=model.param_count())
    batch = draw_pde_batch(HEAT, SamplerConfig(), 6, model.d_enc, np.random.default_rng(8))
    constraints = ConstraintConfig.for_problem(HEAT)

    def loss(p):
        return loss_pde(model, p, batch, HEAT, constraints, LossKind.MSE)

    _, g = value_and_grad(loss, params)
    h = 1e-6
    for i in np.random.default_rng(9).choice(params.size, size=8, replace=False):
        step = np.zeros_like(params)
        step[i] = h
        fd = (float(loss(params + step)) - float(loss(params - step))) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_zero_steps_returns_initialization():
    model = tiny_model()
    checkpoint = train(BURGERS, model, tiny_config(n_steps=0, seed=11))
    np.testing.assert_array_equal(checkpoint.params, model.init_params(np.random.default_rng(11)))
    assert checkpoint.kind == ModelKind.NPR
    assert checkpoint.steps == 0


def test_training_is_deterministic():
    cfg = tiny_config(n_steps=3, seed=5)
    first = train(BURGERS, tiny_model(), cfg)
    second = train(BURGERS, tiny_model(), cfg)
    np.testing.assert_array_equal(first.params, second.params)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_tiny_burgers_run_lowers_loss(seed):
    model = tiny_model()
    cfg = tiny_config(n_steps=64, batch_pde=16, lr_peak=5e-3, seed=seed)
    trainer = Trainer(BURGERS, model, SamplerConfig(), cfg.model_copy(update={"batch_pde": 256}))
    probe = trainer.draw(np.random.default_rng(1000 + seed))
    weights = LossWeights.initial(trainer.constraints)

    before = trainer.evaluate_loss(model.init_params(np.random.default_rng(seed)), probe, weights)
    after = trainer.evaluate_loss(train(BURGERS, model, cfg).params, probe, weights)
    assert after < before


def test_soft_run_refreshes_weights_and_reports_progress():
    records = []
    cfg = tiny_config(n_steps=4, weight_update_every=2, hardcode_ic=False, hardcode_bc=False)
    train(HEAT, tiny_model(), cfg, sink=records.append)
    assert [r.step for r in records] == [1, 2, 3, 4]
    assert (records[0].lambda_pde, records[0].lambda_ic, records[0].lambda_bc) == (1.0, 1.0, 1.0)
    refreshed = records[1]
    assert all(np.isfinite([refreshed.lambda_pde, refreshed.lambda_ic, refreshed.lambda_bc]))
    assert refreshed.lambda_pde >= 1.0
    assert all(r.loss_ic > 0 and r.loss_bc > 0 for r in records)
    assert records[0].lr == pytest.approx(lr_at(1, cfg))


def test_weighted_gradient_norms_are_equal():
    norms = {"pde": 0.3, "ic": 2.0, "bc": 7.5}
    weights = update_loss_weights(norms)
    products = [weights[c] * g for c, g in norms.items()]
    for value in products[1:]:
        assert value == pytest.approx(products[0], rel=1e-10)


def test_refresh_during_training_balances_gradient_norms():
    cfg = tiny_config(n_steps=3, hardcode_ic=False, hardcode_bc=False)
    trainer = Trainer(HEAT, tiny_model(), SamplerConfig(), cfg)
    params = trainer.run()
    weights = trainer.refresh_weights(params, LossWeights.initial(trainer.constraints), np.random.default_rng(21))

    # refresh_weights draws its batches first, so the same seed reproduces them
    batches = trainer.draw(np.random.default_rng(21))
    products = []
    for component in trainer.active:
        _, g = trainer.component_grad(params, batches, component)
        products.append(weights[component] * np.linalg.norm(g))
    assert trainer.active == ("pde", "ic", "bc")
    for value in products[1:]:
        assert value == pytest.approx(products[0], rel=1e-10)
