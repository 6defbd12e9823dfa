"""
Physics-informed training: loss assembly, gradient-norm loss balancing,
Adam with a warmup/linear-decay schedule and the minibatch loop.

Initial conditions and collocation points are drawn fresh at every step and
paired one-to-one inside a batch.
"""

import logging
from enum import Enum
from typing import Callable, Dict, Mapping, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from autodiff import (
    NonFiniteLossError,
    absolute,
    directional_derivs,
    reduce_mean,
    square,
    value_and_grad,
    value_of,
)
from checkpoint import Checkpoint, ModelKind
from nets import ConstraintConfig, ConstraintMode, SolutionModel, constrained_field
from problems import (
    BoundaryKind,
    Equation,
    IbvpSpec,
    ICBatch,
    SamplerConfig,
    residual,
    sample_collocation,
    sample_ic_batch,
)

logger = logging.getLogger(__name__)


class NonFiniteResidualError(FloatingPointError):
    """A PDE residual is NaN or infinite at one batch element."""

    def __init__(self, index: int):
        super().__init__(f"Non-finite residual at batch element {index}")
        self.index = index


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"Training diverged at step {step}: {reason}")
        self.step = step


class LossKind(str, Enum):
    MAE = "mae"
    MSE = "mse"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_steps: int = Field(65536, ge=0)
    batch_pde: int = Field(2048, ge=1)
    batch_ic: int = Field(256, ge=1)
    batch_bc: int = Field(256, ge=1)
    lr_peak: float = Field(1e-3, gt=0)
    warmup_frac: float = Field(0.1, gt=0, lt=1)
    weight_update_every: int = Field(100, ge=1)
    loss_kind: LossKind = LossKind.MAE
    seed: int = 0
    hardcode_ic: bool = True
    hardcode_bc: bool = True
    log_every: int = Field(100, ge=1)


COMPONENTS = ("pde", "ic", "bc")


class LossWeights(BaseModel):
    """Weights of the loss components; hardcoded components stay at 0."""

    model_config = ConfigDict(frozen=True)

    lambda_pde: float = Field(1.0, ge=0)
    lambda_ic: float = Field(0.0, ge=0)
    lambda_bc: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _check_finite(self) -> "LossWeights":
        if not all(np.isfinite(self[c]) for c in COMPONENTS):
            raise ValueError("Loss weights must be finite")
        return self

    def __getitem__(self, component: str) -> float:
        return getattr(self, f"lambda_{component}")

    @classmethod
    def initial(cls, constraints: ConstraintConfig) -> "LossWeights":
        return cls(
            lambda_pde=1.0,
            lambda_ic=1.0 if constraints.ic_mode == ConstraintMode.SOFT else 0.0,
            lambda_bc=1.0 if constraints.bc_mode == ConstraintMode.SOFT else 0.0,
        )


def active_components(constraints: ConstraintConfig):
    components = ["pde"]
    if constraints.ic_mode == ConstraintMode.SOFT:
        components.append("ic")
    if constraints.bc_mode == ConstraintMode.SOFT:
        components.append("bc")
    return tuple(components)


def update_loss_weights(norms: Mapping[str, float],
                        previous: Optional[LossWeights] = None) -> LossWeights:
    """lambda_i = M / g_i with M the sum of the active gradient norms.

    Components missing from ``norms`` get weight 0. A zero norm keeps the
    previous weight of that component.
    """
    previous = previous or LossWeights(lambda_pde=1.0, lambda_ic=1.0, lambda_bc=1.0)
    for component, g in norms.items():
        if component not in COMPONENTS:
            raise ValueError(f"Unknown loss component: {component}")
        if not np.isfinite(g) or g < 0:
            raise ValueError(f"Gradient norm of {component} is invalid: {g}")
    total = sum(norms.values())
    weights = {}
    for component in COMPONENTS:
        if component not in norms:
            weights[f"lambda_{component}"] = 0.0
        elif norms[component] == 0:
            weights[f"lambda_{component}"] = previous[component]
        else:
            weights[f"lambda_{component}"] = total / norms[component]
    return LossWeights(**weights)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak over warmup_frac of the run, then linear decay to 0."""
    if cfg.n_steps == 0:
        return 0.0
    step = min(max(step, 0), cfg.n_steps)
    warmup = cfg.warmup_frac * cfg.n_steps
    if step < warmup:
        return cfg.lr_peak * step / warmup
    return cfg.lr_peak * (cfg.n_steps - step) / (cfg.n_steps - warmup)


class AdamState(NamedTuple):
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float):
    """One bias-corrected Adam update. Returns (state, params); inputs are not modified."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"Shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(state.step + 1, "non-finite gradient")

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state._replace(m=m, v=v, step=t), params


# Batches

class CollocationBatch(NamedTuple):
    """B initial conditions paired with B space-time points."""

    ics: ICBatch
    sensors: np.ndarray
    t: np.ndarray
    x: np.ndarray


def draw_pde_batch(spec: IbvpSpec, sampler: SamplerConfig, size: int, d_enc: int,
                   rng: np.random.Generator) -> CollocationBatch:
    ics = sample_ic_batch(spec, sampler, size, rng)
    t, x = sample_collocation(size, spec.T_final, rng)
    return CollocationBatch(ics, ics.discretize(d_enc), t, x)


def draw_ic_batch(spec: IbvpSpec, sampler: SamplerConfig, size: int, d_enc: int,
                  rng: np.random.Generator) -> CollocationBatch:
    ics = sample_ic_batch(spec, sampler, size, rng)
    x = rng.uniform(0.0, 1.0, size=size)
    return CollocationBatch(ics, ics.discretize(d_enc), np.zeros(size), x)


def draw_bc_batch(spec: IbvpSpec, sampler: SamplerConfig, size: int, d_enc: int,
                  rng: np.random.Generator) -> CollocationBatch:
    ics = sample_ic_batch(spec, sampler, size, rng)
    t = rng.uniform(0.0, spec.T_final, size=size)
    if spec.bc_kind == BoundaryKind.DIRICHLET_BOTH_ENDS:
        x = rng.integers(0, 2, size=size).astype(np.float64)
    else:
        x = np.zeros(size)
    return CollocationBatch(ics, ics.discretize(d_enc), t, x)


# Losses

def aggregate(values, loss_kind: LossKind):
    """Mean absolute or mean squared value."""
    if loss_kind == LossKind.MAE:
        return reduce_mean(absolute(values))
    return reduce_mean(square(values))


def loss_pde(model: SolutionModel, params, batch: CollocationBatch, spec: IbvpSpec,
             constraints: ConstraintConfig, loss_kind: LossKind = LossKind.MAE):
    """Mean residual magnitude of the constrained model over the batch."""
    if len(batch.t) == 0:
        raise ValueError("Empty collocation batch")
    field = constrained_field(model, params, batch.ics, batch.sensors, constraints)
    x_order = 2 if spec.needs_second_derivative else 1
    derivs = directional_derivs(field, batch.t, batch.x, x_order=x_order)
    res = residual(spec, derivs.u, derivs.u_t, derivs.u_x, derivs.u_xx)
    finite = np.isfinite(np.asarray(value_of(res)))
    if not np.all(finite):
        raise NonFiniteResidualError(int(np.argmin(finite)))
    return aggregate(res, loss_kind)


def loss_ic(model: SolutionModel, params, batch: CollocationBatch,
            constraints: ConstraintConfig, loss_kind: LossKind = LossKind.MAE):
    """Mean deviation of the model at t = 0 from u0."""
    field = constrained_field(model, params, batch.ics, batch.sensors, constraints)
    t0 = np.zeros_like(batch.x)
    return aggregate(field(t0, batch.x) - batch.ics.evaluate(batch.x), loss_kind)


def loss_bc(model: SolutionModel, params, batch: CollocationBatch, spec: IbvpSpec,
            constraints: ConstraintConfig, loss_kind: LossKind = LossKind.MAE):
    """Mean deviation from the Dirichlet data u0(0) (and u0(1) for heat)."""
    field = constrained_field(model, params, batch.ics, batch.sensors, constraints)
    u_left, u_right = batch.ics.boundary()
    if spec.equation == Equation.HEAT:
        target = np.where(batch.x == 0.0, u_left, u_right)
    else:
        target = u_left
    return aggregate(field(batch.t, batch.x) - target, loss_kind)


def component_losses(model: SolutionModel, params, batches: Mapping[str, CollocationBatch],
                     spec: IbvpSpec, constraints: ConstraintConfig, loss_kind: LossKind) -> Dict:
    losses = {}
    if "pde" in batches:
        losses["pde"] = loss_pde(model, params, batches["pde"], spec, constraints, loss_kind)
    if "ic" in batches:
        losses["ic"] = loss_ic(model, params, batches["ic"], constraints, loss_kind)
    if "bc" in batches:
        losses["bc"] = loss_bc(model, params, batches["bc"], spec, constraints, loss_kind)
    return losses


# Training loop

class ProgressRecord(NamedTuple):
    step: int
    lr: float
    lambda_pde: float
    lambda_ic: float
    lambda_bc: float
    loss_pde: float
    loss_ic: float
    loss_bc: float
    loss_total: float


ProgressSink = Callable[[ProgressRecord], None]


class Trainer:
    """Runs the physics-informed loop for any ``SolutionModel``."""

    def __init__(self, problem: IbvpSpec, model: SolutionModel, sampler: SamplerConfig,
                 cfg: TrainConfig, constraints: Optional[ConstraintConfig] = None):
        self.problem = problem
        self.model = model
        self.sampler = sampler
        self.cfg = cfg
        self.constraints = constraints or ConstraintConfig.for_problem(
            problem, hardcode_ic=cfg.hardcode_ic, hardcode_bc=cfg.hardcode_bc)
        self.active = active_components(self.constraints)

    def draw(self, rng: np.random.Generator) -> Dict[str, CollocationBatch]:
        cfg, d_enc = self.cfg, self.model.d_enc
        batches = {"pde": draw_pde_batch(self.problem, self.sampler, cfg.batch_pde, d_enc, rng)}
        if "ic" in self.active:
            batches["ic"] = draw_ic_batch(self.problem, self.sampler, cfg.batch_ic, d_enc, rng)
        if "bc" in self.active:
            batches["bc"] = draw_bc_batch(self.problem, self.sampler, cfg.batch_bc, d_enc, rng)
        return batches

    def component_grad(self, params: np.ndarray, batches, component: str):
        def loss(p):
            return component_losses(self.model, p, {component: batches[component]},
                                    self.problem, self.constraints, self.cfg.loss_kind)[component]
        return value_and_grad(loss, params)

    def refresh_weights(self, params: np.ndarray, weights: LossWeights,
                        rng: np.random.Generator) -> LossWeights:
        batches = self.draw(rng)
        norms = {}
        for component in self.active:
            _, g = self.component_grad(params, batches, component)
            norms[component] = float(np.linalg.norm(g))
        return update_loss_weights(norms, weights)

    def total_loss(self, params, batches, weights: LossWeights):
        """Returns (loss, per-component values) for one step."""
        parts = component_losses(self.model, params, batches, self.problem,
                                 self.constraints, self.cfg.loss_kind)
        total = 0.0
        for component, value in parts.items():
            total = total + weights[component] * value
        return total, {c: float(np.asarray(value_of(v))) for c, v in parts.items()}

    def evaluate_loss(self, params: np.ndarray, batches, weights: LossWeights) -> float:
        total, _ = self.total_loss(params, batches, weights)
        return float(np.asarray(value_of(total)))

    def run(self, params: Optional[np.ndarray] = None, sink: Optional[ProgressSink] = None):
        """Train from ``params`` (fresh initialization if None). Returns the final parameters."""
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        if params is None:
            params = self.model.init_params(rng)
        params = np.array(params, dtype=np.float64, copy=True)
        state = AdamState.zeros(params.size)
        weights = LossWeights.initial(self.constraints)
        logger.info("Training %s on %s: %d parameters, %d steps, components %s",
                    self.model.kind, self.problem.equation.value, params.size, cfg.n_steps,
                    "+".join(self.active))

        for step in range(1, cfg.n_steps + 1):
            if step % cfg.weight_update_every == 0 and len(self.active) > 1:
                try:
                    weights = self.refresh_weights(params, weights, rng)
                except (NonFiniteLossError, NonFiniteResidualError) as e:
                    raise DivergenceError(step, str(e)) from e
                logger.info("Step %d: loss weights pde=%.4g ic=%.4g bc=%.4g", step,
                            weights.lambda_pde, weights.lambda_ic, weights.lambda_bc)

            batches = self.draw(rng)
            parts: Dict[str, float] = {}

            def loss(p):
                total, values = self.total_loss(p, batches, weights)
                parts.update(values)
                return total

            try:
                value, g = value_and_grad(loss, params)
            except (NonFiniteLossError, NonFiniteResidualError) as e:
                raise DivergenceError(step, str(e)) from e
            lr = lr_at(step, cfg)
            state, params = adam_step(state, params, g, lr)

            if sink is not None:
                sink(ProgressRecord(step, lr, weights.lambda_pde, weights.lambda_ic, weights.lambda_bc,
                                    parts.get("pde", 0.0), parts.get("ic", 0.0), parts.get("bc", 0.0),
                                    value))
            if step % cfg.log_every == 0 or step == cfg.n_steps:
                logger.info("Step %d/%d: loss %.4e (pde %.4e), lr %.3g", step, cfg.n_steps,
                            value, parts.get("pde", 0.0), lr)
        return params


def train(problem: IbvpSpec, model: SolutionModel, cfg: TrainConfig,
          sampler: Optional[SamplerConfig] = None, sink: Optional[ProgressSink] = None,
          params: Optional[np.ndarray] = None) -> Checkpoint:
    """Run the full training loop and package the result."""
    sampler = sampler or SamplerConfig()
    trainer = Trainer(problem, model, sampler, cfg)
    final = trainer.run(params=params, sink=sink)
    return Checkpoint(
        kind=ModelKind(model.kind),
        problem=problem,
        spec=model.spec,
        constraints=trainer.constraints,
        d_enc=model.d_enc,
        params=final,
        seed=cfg.seed,
        steps=cfg.n_steps,
    )
