"""
Error metrics against reference fields, the multi-IC evaluation protocol,
and unfold-then-fine-tune for new (possibly out-of-distribution) initial
conditions.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from autodiff import NonFiniteLossError, value_and_grad
from checkpoint import Checkpoint, ModelKind
from nets import NprModel, constrained_field, unfold_lowrank
from problems import BoundaryKind, IbvpSpec, ICBatch, ICSample, sample_collocation
from reference import FieldGrid, grid_axes, reference_field
from training import (
    AdamState,
    CollocationBatch,
    DivergenceError,
    LossKind,
    NonFiniteResidualError,
    active_components,
    adam_step,
    component_losses,
)

logger = logging.getLogger(__name__)


class FieldMetrics(BaseModel):
    """Errors of one model field. ``rms`` is an extra, not one of the reported norms."""

    model_config = ConfigDict(frozen=True)

    label: str = ""
    l1: float
    l2: float
    linf: float
    rms: float


class MetricsReport(BaseModel):
    """Means over initial conditions, with the per-IC rows preserved."""

    model_config = ConfigDict(frozen=True)

    l1: float
    l2: float
    linf: float
    rms: float
    per_ic: Tuple[FieldMetrics, ...]
    nt: int
    nx: int

    @classmethod
    def aggregate(cls, rows: Sequence[FieldMetrics], nt: int, nx: int) -> "MetricsReport":
        if not rows:
            raise ValueError("No fields to aggregate")
        return cls(
            l1=float(np.mean([r.l1 for r in rows])),
            l2=float(np.mean([r.l2 for r in rows])),
            linf=float(np.mean([r.linf for r in rows])),
            rms=float(np.mean([r.rms for r in rows])),
            per_ic=tuple(rows),
            nt=nt,
            nx=nx,
        )


def field_metrics(model_field: FieldGrid, ref_field: FieldGrid, label: str = "") -> FieldMetrics:
    """L1 = sum(d)/N, L2 = sqrt(sum(d^2))/N, Linf = max(d), N = nt*nx."""
    if not model_field.same_grid(ref_field):
        raise ValueError(
            f"Grid mismatch: {model_field.nt}x{model_field.nx} vs {ref_field.nt}x{ref_field.nx}"
        )
    d = np.abs(model_field.values - ref_field.values)
    n = d.size
    return FieldMetrics(
        label=label,
        l1=float(d.sum() / n),
        l2=float(np.sqrt((d * d).sum()) / n),
        linf=float(d.max()),
        rms=float(np.sqrt((d * d).mean())),
    )


def compute_metrics(model_field: FieldGrid, ref_field: FieldGrid, label: str = "") -> MetricsReport:
    row = field_metrics(model_field, ref_field, label)
    return MetricsReport.aggregate([row], model_field.nt, model_field.nx)


def model_field(checkpoint: Checkpoint, ic: ICSample, nt: int, nx: int) -> FieldGrid:
    """Tabulate a checkpoint's constrained model on the grid for one condition."""
    model = checkpoint.model()
    ics = ICBatch.from_samples([ic])
    sensors = ics.discretize(checkpoint.d_enc)
    field = constrained_field(model, checkpoint.params, ics, sensors, checkpoint.constraints)
    t_vals, x_vals = grid_axes(nt, nx, checkpoint.problem.T_final)
    t, x = np.meshgrid(t_vals, x_vals, indexing="ij")
    values = np.broadcast_to(np.asarray(field(t, x), dtype=np.float64), (nt, nx)).copy()
    return FieldGrid(t_vals=t_vals, x_vals=x_vals, values=values)


class FieldComparison(NamedTuple):
    label: str
    model: FieldGrid
    reference: FieldGrid

    @property
    def difference(self) -> FieldGrid:
        return self.model.model_copy(update={"values": np.abs(self.model.values - self.reference.values)})


class Evaluation(NamedTuple):
    report: MetricsReport
    fields: List[FieldComparison]


def _compare_one(checkpoint: Checkpoint, ic: ICSample, nt: int, nx: int, substeps: int) -> FieldComparison:
    label = ic.describe()
    logger.debug("Evaluating %s on %dx%d", label, nt, nx)
    return FieldComparison(label, model_field(checkpoint, ic, nt, nx),
                           reference_field(checkpoint.problem, ic, nt, nx, substeps=substeps))


def evaluate_fields(checkpoint: Checkpoint, ics: Sequence[ICSample], nt: int = 500, nx: int = 500,
                    workers: int = 1, substeps: int = 4) -> Evaluation:
    """Model and reference fields plus metrics for every condition.

    Conditions are processed on up to ``workers`` threads; results keep
    the input order.
    """
    if not ics:
        raise ValueError("Need at least one initial condition to evaluate")
    workers = max(1, min(workers, len(ics)))
    if workers == 1:
        comparisons = [_compare_one(checkpoint, ic, nt, nx, substeps) for ic in ics]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            comparisons = list(pool.map(lambda ic: _compare_one(checkpoint, ic, nt, nx, substeps), ics))
    rows = [field_metrics(c.model, c.reference, c.label) for c in comparisons]
    report = MetricsReport.aggregate(rows, nt, nx)
    logger.info("Evaluated %d conditions: L1 %.3e, L2 %.3e, Linf %.3e",
                len(ics), report.l1, report.l2, report.linf)
    return Evaluation(report, comparisons)


def evaluate(checkpoint: Checkpoint, ics: Sequence[ICSample], nt: int = 500, nx: int = 500,
             workers: int = 1, substeps: int = 4) -> MetricsReport:
    return evaluate_fields(checkpoint, ics, nt, nx, workers=workers, substeps=substeps).report


def unfold(checkpoint: Checkpoint, ic: ICSample) -> Checkpoint:
    """Regress theta for ``ic`` and materialize W_i = A_i B_i as a dense PINN."""
    if checkpoint.kind != ModelKind.NPR:
        raise ValueError(f"Only npr checkpoints can be unfolded, got {checkpoint.kind.value}")
    model = checkpoint.model()
    assert isinstance(model, NprModel)
    sensors = ICBatch.from_samples([ic]).discretize(checkpoint.d_enc)
    theta = np.asarray(model.regress(checkpoint.params, sensors))[0]
    dense_spec, flat = unfold_lowrank(theta, model.spec.target)
    return Checkpoint(
        kind=ModelKind.DENSE_PINN,
        problem=checkpoint.problem,
        spec=dense_spec,
        constraints=checkpoint.constraints,
        d_enc=checkpoint.d_enc,
        params=flat,
        seed=checkpoint.seed,
        steps=checkpoint.steps,
        ic=ic,
    )


class FinetuneConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(200, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch: int = Field(512, ge=1)
    loss_kind: LossKind = LossKind.MAE
    seed: int = 0


def _finetune_batches(problem: IbvpSpec, ics: ICBatch, sensors: np.ndarray, components, size: int,
                      rng: np.random.Generator):
    t, x = sample_collocation(size, problem.T_final, rng)
    batches = {"pde": CollocationBatch(ics, sensors, t, x)}
    if "ic" in components:
        batches["ic"] = CollocationBatch(ics, sensors, np.zeros(size), rng.uniform(0.0, 1.0, size))
    if "bc" in components:
        t_bc = rng.uniform(0.0, problem.T_final, size)
        if problem.bc_kind == BoundaryKind.DIRICHLET_BOTH_ENDS:
            x_bc = rng.integers(0, 2, size=size).astype(np.float64)
        else:
            x_bc = np.zeros(size)
        batches["bc"] = CollocationBatch(ics, sensors, t_bc, x_bc)
    return batches


def finetune(checkpoint: Checkpoint, cfg: Optional[FinetuneConfig] = None,
             ic: Optional[ICSample] = None) -> Checkpoint:
    """Train an unfolded network as a conventional PINN at a constant learning rate."""
    cfg = cfg or FinetuneConfig()
    if checkpoint.kind != ModelKind.DENSE_PINN:
        raise ValueError(f"Fine-tuning needs an unfolded dense_pinn checkpoint, got {checkpoint.kind.value}")
    ic = ic if ic is not None else checkpoint.ic
    if ic is None:
        raise ValueError("Fine-tuning needs an initial condition: pass one or unfold the checkpoint for it")
    problem, constraints = checkpoint.problem, checkpoint.constraints
    model = checkpoint.model()
    ics = ICBatch.from_samples([ic])
    sensors = ics.discretize(checkpoint.d_enc)
    components = active_components(constraints)

    rng = np.random.default_rng(cfg.seed)
    params = np.array(checkpoint.params, dtype=np.float64, copy=True)
    state = AdamState.zeros(params.size)
    for step in range(1, cfg.steps + 1):
        batches = _finetune_batches(problem, ics, sensors, components, cfg.batch, rng)

        def loss(p):
            parts = component_losses(model, p, batches, problem, constraints, cfg.loss_kind)
            return sum(parts.values())

        try:
            value, g = value_and_grad(loss, params)
        except (NonFiniteLossError, NonFiniteResidualError) as e:
            raise DivergenceError(step, str(e)) from e
        state, params = adam_step(state, params, g, cfg.lr)
        if step % 50 == 0 or step == cfg.steps:
            logger.info("Fine-tune step %d/%d: loss %.4e", step, cfg.steps, value)

    return checkpoint.replace(params=params, ic=ic, steps=checkpoint.steps + cfg.steps)
