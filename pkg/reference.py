"""
Ground-truth solution fields: Crank-Nicolson for the heat equation and the
closed-form pre-shock solution of inviscid Burgers with affine data.
"""

import logging
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.linalg import solve_banded

from problems import Equation, IbvpSpec, ICKind, ICSample, eval_ic

logger = logging.getLogger(__name__)


class ShockRegionError(ValueError):
    """Query lies at or past the shock time, where a*t + 1 <= 0."""


class SolverError(FloatingPointError):
    """The finite-difference solution stopped being finite."""


class ICFamilyError(ValueError):
    """No reference solution exists for this kind of initial condition."""


class FieldGrid(BaseModel):
    """u(t_i, x_j) on an equidistant grid including both endpoints."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    t_vals: np.ndarray
    x_vals: np.ndarray
    values: np.ndarray

    @model_validator(mode="after")
    def _check_shape(self) -> "FieldGrid":
        expected = (len(self.t_vals), len(self.x_vals))
        if self.values.shape != expected:
            raise ValueError(f"Field values have shape {self.values.shape}, expected {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Field values must be finite")
        return self

    @property
    def nt(self) -> int:
        return len(self.t_vals)

    @property
    def nx(self) -> int:
        return len(self.x_vals)

    @classmethod
    def on_grid(cls, values: np.ndarray, T: float = 1.0) -> "FieldGrid":
        nt, nx = values.shape
        t_vals, x_vals = grid_axes(nt, nx, T)
        return cls(t_vals=t_vals, x_vals=x_vals, values=values)

    def same_grid(self, other: "FieldGrid") -> bool:
        return (self.values.shape == other.values.shape
                and np.array_equal(self.t_vals, other.t_vals)
                and np.array_equal(self.x_vals, other.x_vals))

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """(t, x) arrays of shape (nt, nx)."""
        return np.meshgrid(self.t_vals, self.x_vals, indexing="ij")


def grid_axes(nt: int, nx: int, T: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """t_i = i*T/(nt-1), x_j = j/(nx-1)."""
    if nt < 2 or nx < 2:
        raise ValueError(f"Grid needs at least 2x2 points, got {nt}x{nx}")
    return np.linspace(0.0, T, nt), np.linspace(0.0, 1.0, nx)


def heat_fd_solve(ic: ICSample, kappa: float, nt: int, nx: int, substeps: int = 4,
                  T: float = 1.0) -> FieldGrid:
    """Crank-Nicolson with the boundary values of u0 held fixed.

    The internal time step is T / ((nt - 1) * substeps); every
    ``substeps``-th state is stored.
    """
    if substeps < 1:
        raise ValueError(f"substeps must be at least 1, got {substeps}")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    t_vals, x_vals = grid_axes(nt, nx, T)
    dx = x_vals[1] - x_vals[0]
    dt = T / ((nt - 1) * substeps)
    r = kappa * dt / dx ** 2

    u = np.asarray(eval_ic(ic, x_vals), dtype=np.float64)
    u_left, u_right = u[0], u[-1]
    values = np.empty((nt, nx))
    values[0] = u
    if nx == 2:
        values[1:] = u
        return FieldGrid(t_vals=t_vals, x_vals=x_vals, values=values)

    n = nx - 2
    # (I - r/2 L) in banded storage: upper, diagonal, lower
    ab = np.zeros((3, n))
    ab[0, 1:] = -0.5 * r
    ab[1, :] = 1.0 + r
    ab[2, :-1] = -0.5 * r
    boundary = np.zeros(n)
    boundary[0] += r * u_left
    boundary[-1] += r * u_right
    logger.debug("Crank-Nicolson: nx=%d, dt=%.3g, r=%.3g, %d steps", nx, dt, r, (nt - 1) * substeps)

    interior = u[1:-1].copy()
    for i in range(1, nt):
        for _ in range(substeps):
            padded = np.concatenate(([u_left], interior, [u_right]))
            rhs = (1.0 - r) * interior + 0.5 * r * (padded[:-2] + padded[2:])
            # Implicit half of the boundary coupling; the explicit half is in padded
            rhs = rhs + 0.5 * boundary
            interior = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(interior)):
            raise SolverError(f"Non-finite heat solution at t={t_vals[i]:.4g}")
        values[i, 0], values[i, -1] = u_left, u_right
        values[i, 1:-1] = interior
    return FieldGrid(t_vals=t_vals, x_vals=x_vals, values=values)


Real = Union[float, np.ndarray]


def burgers_exact(a: float, b: float, t: Real, x: Real) -> Real:
    """min((a x + b) / (a t + 1), b), valid until the shock at t = -1/a."""
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    denominator = a * t + 1.0
    if np.any(denominator <= 0):
        raise ShockRegionError(f"a*t + 1 <= 0 for a={a}: past the shock time")
    out = np.minimum((a * x + b) / denominator, b)
    return float(out) if out.ndim == 0 else out


def field_from_exact(a: float, b: float, nt: int, nx: int, T: float = 1.0) -> FieldGrid:
    t_vals, x_vals = grid_axes(nt, nx, T)
    t, x = np.meshgrid(t_vals, x_vals, indexing="ij")
    return FieldGrid(t_vals=t_vals, x_vals=x_vals, values=burgers_exact(a, b, t, x))


def affine_coefficients(ic: ICSample) -> Tuple[float, float]:
    """(a, b) of an affine condition a*x + b."""
    if ic.kind == ICKind.TABULATED or any(term.amplitude for term in ic.terms):
        raise ICFamilyError(f"Burgers reference needs an affine initial condition, got {ic.describe()}")
    return ic.slope, ic.intercept


def reference_field(spec: IbvpSpec, ic: ICSample, nt: int, nx: int, substeps: int = 4) -> FieldGrid:
    """Reference solution of the problem for one initial condition."""
    if spec.equation == Equation.HEAT:
        return heat_fd_solve(ic, spec.kappa, nt, nx, substeps=substeps, T=spec.T_final)
    a, b = affine_coefficients(ic)
    return field_from_exact(a, b, nt, nx, T=spec.T_final)
