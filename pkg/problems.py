"""
Initial-boundary-value problems on [0, T] x [0, 1]: equations, residuals,
initial-condition families, samplers and sensor discretization.
"""

import logging
import math
import re
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from autodiff import Jet2, cos, sin, value_of

logger = logging.getLogger(__name__)


class Equation(str, Enum):
    HEAT = "heat"
    BURGERS = "burgers"


class BoundaryKind(str, Enum):
    DIRICHLET_BOTH_ENDS = "dirichlet_both_ends"
    DIRICHLET_LEFT = "dirichlet_left"


class IbvpSpec(BaseModel):
    """``u_t = N(u)`` on [0, T] x [0, 1] with Dirichlet data taken from u0."""

    model_config = ConfigDict(frozen=True)

    equation: Equation = Equation.HEAT
    T_final: float = Field(1.0, gt=0)
    kappa: float = Field(0.05, gt=0)

    @property
    def bc_kind(self) -> BoundaryKind:
        if self.equation == Equation.HEAT:
            return BoundaryKind.DIRICHLET_BOTH_ENDS
        return BoundaryKind.DIRICHLET_LEFT

    @property
    def needs_second_derivative(self) -> bool:
        return self.equation == Equation.HEAT


def residual(spec: IbvpSpec, u, u_t, u_x, u_xx):
    """``u_t - N(u)``; zero wherever the PDE holds."""
    if spec.equation == Equation.HEAT:
        if u_xx is None:
            raise ValueError("Heat residual needs u_xx")
        return u_t - spec.kappa * u_xx
    return u_t + u * u_x


# Initial conditions

class ICKind(str, Enum):
    FOURIER = "fourier"
    AFFINE = "affine"
    TABULATED = "tabulated"
    EXPRESSION = "expression"


class Wave(str, Enum):
    SIN = "sin"
    COS = "cos"


class FourierTerm(BaseModel):
    """``amplitude * wave(omega * x + phase)``"""

    model_config = ConfigDict(frozen=True)

    amplitude: float
    omega: float
    wave: Wave = Wave.SIN
    phase: float = 0.0


class ICSample(BaseModel):
    """A single initial condition u0 on [0, 1].

    Closed forms are ``intercept + slope * x + sum(terms)``. Tabulated
    conditions interpolate linearly between equidistant samples.
    """

    model_config = ConfigDict(frozen=True)

    kind: ICKind
    intercept: float = 0.0
    slope: float = 0.0
    terms: Tuple[FourierTerm, ...] = ()
    table: Optional[Tuple[float, ...]] = None
    label: str = ""

    @model_validator(mode="after")
    def _check_table(self) -> "ICSample":
        if self.kind == ICKind.TABULATED:
            if self.table is None or len(self.table) < 2:
                raise ValueError("Tabulated initial condition needs at least two samples")
        elif self.table is not None:
            raise ValueError(f"Only tabulated initial conditions carry a table, got kind {self.kind.value}")
        return self

    @classmethod
    def fourier(cls, a0: float, a: Sequence[float], b: Sequence[float], label: str = "") -> "ICSample":
        """``a0 + sum_i a_i sin(2 pi i x) + b_i cos(2 pi i x)``"""
        if len(a) != len(b):
            raise ValueError(f"Coefficient lists differ in length: {len(a)} != {len(b)}")
        terms = []
        for i, (ai, bi) in enumerate(zip(a, b), start=1):
            omega = 2.0 * math.pi * i
            terms.append(FourierTerm(amplitude=float(ai), omega=omega, wave=Wave.SIN))
            terms.append(FourierTerm(amplitude=float(bi), omega=omega, wave=Wave.COS))
        return cls(kind=ICKind.FOURIER, intercept=float(a0), terms=tuple(terms), label=label)

    @classmethod
    def affine(cls, a: float, b: float, label: str = "") -> "ICSample":
        """``a * x + b``"""
        return cls(kind=ICKind.AFFINE, slope=float(a), intercept=float(b), label=label)

    @classmethod
    def tabulated(cls, values: Sequence[float], label: str = "") -> "ICSample":
        return cls(kind=ICKind.TABULATED, table=tuple(float(v) for v in values), label=label)

    @property
    def fourier_coefficients(self) -> Tuple[float, List[float], List[float]]:
        """(a0, a_i, b_i) of a sampled Fourier condition."""
        if self.kind != ICKind.FOURIER:
            raise ValueError(f"Not a Fourier initial condition: {self.kind.value}")
        a = [t.amplitude for t in self.terms if t.wave == Wave.SIN]
        b = [t.amplitude for t in self.terms if t.wave == Wave.COS]
        return self.intercept, a, b

    def in_compact_set(self, c: float) -> bool:
        """Membership of a Fourier condition in C_n^c."""
        a0, a, b = self.fourier_coefficients
        return abs(a0) <= c and all(abs(v) <= c for v in a + b)

    def describe(self) -> str:
        if self.label:
            return self.label
        if self.kind == ICKind.TABULATED:
            return f"tabulated[{len(self.table)}]"
        parts = [f"{self.intercept:.4g}"]
        if self.slope:
            parts.append(f"{self.slope:.4g}*x")
        for term in self.terms:
            if term.amplitude:
                parts.append(f"{term.amplitude:.4g}*{term.wave.value}({term.omega:.4g}*x)")
        return " + ".join(parts)


class ICBatch:
    """Vectorized evaluator for a batch of initial conditions.

    Coefficient arrays have a leading batch axis of size B. A batch of one
    broadcasts against any number of query points.
    """

    def __init__(self, intercept: np.ndarray, slope: np.ndarray,
                 amplitude: np.ndarray, omega: np.ndarray, phase: np.ndarray,
                 is_cos: np.ndarray, table: Optional[np.ndarray] = None):
        self.intercept = intercept
        self.slope = slope
        self.amplitude = amplitude
        self.omega = omega
        self.phase = phase
        self.is_cos = is_cos
        self.table = table

    def __len__(self) -> int:
        return self.intercept.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[ICSample]) -> "ICBatch":
        if not samples:
            raise ValueError("Empty initial-condition batch")
        n = len(samples)
        k = max(len(s.terms) for s in samples)
        amplitude = np.zeros((n, k))
        omega = np.zeros((n, k))
        phase = np.zeros((n, k))
        is_cos = np.zeros((n, k), dtype=bool)
        for i, s in enumerate(samples):
            for j, term in enumerate(s.terms):
                amplitude[i, j] = term.amplitude
                omega[i, j] = term.omega
                phase[i, j] = term.phase
                is_cos[i, j] = term.wave == Wave.COS

        table = None
        tabulated = [s for s in samples if s.kind == ICKind.TABULATED]
        if tabulated:
            sizes = {len(s.table) for s in tabulated}
            if len(sizes) != 1:
                raise ValueError(f"Tabulated conditions in one batch must share a size, got {sorted(sizes)}")
            table = np.zeros((n, sizes.pop()))
            for i, s in enumerate(samples):
                if s.table is not None:
                    table[i] = s.table

        return cls(
            intercept=np.array([s.intercept for s in samples]),
            slope=np.array([s.slope for s in samples]),
            amplitude=amplitude, omega=omega, phase=phase, is_cos=is_cos, table=table,
        )

    def _coef(self, arr: np.ndarray, ndim: int) -> np.ndarray:
        return arr.reshape(arr.shape[:1] + (1,) * max(ndim - 1, 0))

    def evaluate(self, x):
        """u0(x) for x broadcastable against the batch axis; x may be a jet."""
        ndim = np.ndim(value_of(x.val if isinstance(x, Jet2) else x))
        out = self._coef(self.intercept, ndim) + self._coef(self.slope, ndim) * x
        for j in range(self.amplitude.shape[1]):
            amp = self._coef(self.amplitude[:, j], ndim)
            if not np.any(amp):
                continue
            arg = self._coef(self.omega[:, j], ndim) * x + self._coef(self.phase[:, j], ndim)
            mask = self._coef(self.is_cos[:, j], ndim)
            if np.all(mask):
                wave = cos(arg)
            elif not np.any(mask):
                wave = sin(arg)
            else:
                wave = cos(arg) * mask + sin(arg) * (1.0 - mask)
            out = out + amp * wave
        if self.table is not None:
            out = out + self._interpolate(x, ndim)
        return out

    def _interpolate(self, x, ndim: int):
        xv = np.asarray(x.val if isinstance(x, Jet2) else x, dtype=np.float64)
        d = self.table.shape[1]
        pos = np.clip(xv, 0.0, 1.0) * (d - 1)
        # Snap sensor locations so the table is reproduced exactly
        nearest = np.rint(pos)
        pos = np.where(np.abs(pos - nearest) < 1e-9, nearest, pos)
        idx = np.clip(np.floor(pos).astype(int), 0, d - 2)
        w = pos - idx
        rows = np.arange(len(self)).reshape((-1,) + (1,) * max(ndim - 1, 0))
        left, right = self.table[rows, idx], self.table[rows, idx + 1]
        val = (1.0 - w) * left + w * right
        if not isinstance(x, Jet2):
            return val
        dudx = (right - left) * (d - 1)
        return Jet2(val, dudx * x.d1, None if x.d2 is None else dudx * x.d2)

    def boundary(self) -> Tuple[np.ndarray, np.ndarray]:
        """(u0(0), u0(1)) per batch element."""
        return (np.asarray(self.evaluate(np.zeros(len(self)))),
                np.asarray(self.evaluate(np.ones(len(self)))))

    def discretize(self, d_enc: int) -> np.ndarray:
        """Sensor matrix of shape (B, d_enc) at x_j = j / (d_enc - 1)."""
        if d_enc < 2:
            raise ValueError(f"Need at least two sensors, got {d_enc}")
        grid = np.linspace(0.0, 1.0, d_enc)[None, :]
        return np.broadcast_to(np.asarray(self.evaluate(grid)), (len(self), d_enc)).copy()


def eval_ic(ic: ICSample, x):
    """u0(x) for a scalar or an array of points."""
    out = ICBatch.from_samples([ic]).evaluate(np.asarray(x, dtype=np.float64))
    return float(np.asarray(out)[0]) if np.ndim(x) == 0 else np.asarray(out)


def discretize(ic: ICSample, d_enc: int) -> np.ndarray:
    """Sensor vector u0(x_j), x_j = j / (d_enc - 1), endpoints included."""
    return ICBatch.from_samples([ic]).discretize(d_enc)[0]


# Samplers

class SamplerConfig(BaseModel):
    """Initial-condition families: Fourier C_n^c (heat) and affine (Burgers)."""

    model_config = ConfigDict(frozen=True)

    n_fourier: int = Field(3, ge=1)
    amplitude: float = Field(2.0, ge=0)
    shrink_high_frequencies: bool = False
    a_range: Tuple[float, float] = (-1.0, 0.0)
    b_range: Tuple[float, float] = (1.0, 2.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SamplerConfig":
        for name in ("a_range", "b_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name} is empty: low {low} > high {high}")
        return self


def _fourier_bounds(n: int, c: float, shrink: bool) -> np.ndarray:
    """Half-widths for (a0, a_1..a_n, b_1..b_n)."""
    per_mode = np.array([c / i if shrink else c for i in range(1, n + 1)])
    return np.concatenate([[c], per_mode, per_mode])


def sample_fourier_ic(n: int, c: float, rng: np.random.Generator, shrink: bool = False) -> ICSample:
    """a0, a_i, b_i ~ U[-c, c] independently."""
    if n < 1:
        raise ValueError(f"Need at least one Fourier mode, got {n}")
    if c < 0:
        raise ValueError(f"Amplitude bound must be non-negative, got {c}")
    bounds = _fourier_bounds(n, c, shrink)
    coeffs = rng.uniform(-1.0, 1.0, size=2 * n + 1) * bounds
    return ICSample.fourier(coeffs[0], coeffs[1:n + 1], coeffs[n + 1:])


def sample_fourier_batch(size: int, n: int, c: float, rng: np.random.Generator,
                         shrink: bool = False) -> ICBatch:
    bounds = _fourier_bounds(n, c, shrink)
    coeffs = rng.uniform(-1.0, 1.0, size=(size, 2 * n + 1)) * bounds
    modes = 2.0 * math.pi * np.arange(1, n + 1)
    # Interleave (sin, cos) per mode, matching ICSample.fourier
    amplitude = np.empty((size, 2 * n))
    amplitude[:, 0::2] = coeffs[:, 1:n + 1]
    amplitude[:, 1::2] = coeffs[:, n + 1:]
    omega = np.repeat(modes, 2)[None, :].repeat(size, axis=0)
    is_cos = np.tile(np.array([False, True]), n)[None, :].repeat(size, axis=0)
    return ICBatch(intercept=coeffs[:, 0], slope=np.zeros(size), amplitude=amplitude,
                   omega=omega, phase=np.zeros((size, 2 * n)), is_cos=is_cos)


def sample_affine_ic(a_range: Tuple[float, float], b_range: Tuple[float, float],
                     rng: np.random.Generator) -> ICSample:
    """a ~ U[a_low, a_high], b ~ U[b_low, b_high]"""
    a = rng.uniform(*a_range)
    b = rng.uniform(*b_range)
    return ICSample.affine(a, b)


def sample_affine_batch(size: int, a_range, b_range, rng: np.random.Generator) -> ICBatch:
    a = rng.uniform(a_range[0], a_range[1], size=size)
    b = rng.uniform(b_range[0], b_range[1], size=size)
    empty = np.zeros((size, 0))
    return ICBatch(intercept=b, slope=a, amplitude=empty, omega=empty, phase=empty,
                   is_cos=np.zeros((size, 0), dtype=bool))


def sample_ic(spec: IbvpSpec, sampler: SamplerConfig, rng: np.random.Generator) -> ICSample:
    """One condition from the equation's training family."""
    if spec.equation == Equation.HEAT:
        return sample_fourier_ic(sampler.n_fourier, sampler.amplitude, rng,
                                 sampler.shrink_high_frequencies)
    return sample_affine_ic(sampler.a_range, sampler.b_range, rng)


def sample_ic_batch(spec: IbvpSpec, sampler: SamplerConfig, size: int,
                    rng: np.random.Generator) -> ICBatch:
    if spec.equation == Equation.HEAT:
        return sample_fourier_batch(size, sampler.n_fourier, sampler.amplitude, rng,
                                    sampler.shrink_high_frequencies)
    return sample_affine_batch(size, sampler.a_range, sampler.b_range, rng)


def sample_collocation(n: int, T: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """n i.i.d. uniform points on [0, T] x [0, 1], returned as (t, x)."""
    if n < 1:
        raise ValueError(f"Need at least one collocation point, got {n}")
    t = rng.uniform(0.0, T, size=n)
    x = rng.uniform(0.0, 1.0, size=n)
    return t, x


def evaluation_ics(spec: IbvpSpec, sampler: SamplerConfig, count: int, seed: int) -> List[ICSample]:
    """A fixed, seeded set of in-distribution conditions."""
    rng = np.random.default_rng(seed)
    ics = []
    for i in range(count):
        ic = sample_ic(spec, sampler, rng)
        ics.append(ic.model_copy(update={"label": f"{spec.equation.value}-{i:02d}"}))
    return ics


# Expression grammar: sums of constant products with at most one of
# x, sin(w*x + p), cos(w*x + p)

class ICExpressionError(ValueError):
    """The text is not a supported initial-condition expression."""


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|(pi|x|sin|cos)|(.))")


def _tokenize(text: str) -> List[str]:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None or match.end() == pos:
            break
        number, name, symbol = match.groups()
        token = number or name or symbol
        if token is not None and not token.isspace():
            tokens.append(token)
        pos = match.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def error(self, message: str) -> ICExpressionError:
        return ICExpressionError(f"Cannot parse initial condition {self.text!r}: {message}")

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected: Optional[str] = None) -> str:
        token = self.peek()
        if token is None:
            raise self.error("unexpected end of input")
        if expected is not None and token != expected:
            raise self.error(f"expected {expected!r}, got {token!r}")
        self.pos += 1
        return token

    def parse(self) -> ICSample:
        if not self.tokens:
            raise self.error("empty expression")
        intercept, slope, terms = 0.0, 0.0, []
        sign = 1.0
        if self.peek() in ("+", "-"):
            sign = -1.0 if self.take() == "-" else 1.0
        while True:
            coef, kind, arg = self.product()
            coef *= sign
            if kind == "const":
                intercept += coef
            elif kind == "x":
                slope += coef
            else:
                omega, phase = arg
                terms.append(FourierTerm(amplitude=coef, omega=omega, phase=phase, wave=Wave(kind)))
            token = self.peek()
            if token is None:
                break
            if token not in ("+", "-"):
                raise self.error(f"unexpected token {token!r}")
            sign = -1.0 if self.take() == "-" else 1.0
        return ICSample(kind=ICKind.EXPRESSION, intercept=intercept, slope=slope,
                        terms=tuple(terms), label=self.text.strip())

    def product(self):
        coef, kind, arg = 1.0, "const", None
        while True:
            factor = self.factor()
            if isinstance(factor, float):
                coef *= factor
            else:
                if kind != "const":
                    raise self.error("nonlinear product")
                kind, arg = factor
            if self.peek() == "*":
                self.take()
                continue
            if self.peek() == "/":
                self.take()
                divisor = self.factor()
                if not isinstance(divisor, float) or divisor == 0:
                    raise self.error("can only divide by a non-zero constant")
                coef /= divisor
                if self.peek() in ("*", "/"):
                    continue
            return coef, kind, arg

    def factor(self):
        token = self.take()
        if token == "pi":
            return math.pi
        if token == "x":
            return ("x", None)
        if token in ("sin", "cos"):
            self.take("(")
            arg = self.linear_argument()
            self.take(")")
            return (token, arg)
        if token == "(":
            inner = self.product()
            self.take(")")
            if inner[1] != "const":
                raise self.error("parentheses may only group constants")
            return inner[0]
        if token == "-":
            value = self.factor()
            if not isinstance(value, float):
                raise self.error("unary minus only applies to constants here")
            return -value
        try:
            return float(token)
        except ValueError:
            raise self.error(f"unexpected token {token!r}") from None

    def linear_argument(self) -> Tuple[float, float]:
        """``w*x + p`` inside sin/cos."""
        omega, phase = 0.0, 0.0
        sign = 1.0
        if self.peek() in ("+", "-"):
            sign = -1.0 if self.take() == "-" else 1.0
        while True:
            coef, kind, _ = self.product()
            if kind == "x":
                omega += sign * coef
            elif kind == "const":
                phase += sign * coef
            else:
                raise self.error("nested sin/cos are not supported")
            if self.peek() in ("+", "-"):
                sign = -1.0 if self.take() == "-" else 1.0
                continue
            return omega, phase


def parse_ic_expression(text: str) -> ICSample:
    """Parse e.g. ``"5*x + 3*sin(4*pi*x)"`` into a closed-form condition."""
    return _Parser(text).parse()


# Named initial conditions accepted wherever an expression is
NAMED_ICS: Dict[str, str] = {
    "heat-a": "0.5*sin(4*pi*x) + cos(2*pi*x) + 0.3*cos(6*pi*x) + 0.8",
    "heat-b": ("sin(pi*x) + cos(pi*x) + sin(2*pi*x) + cos(2*pi*x)"
               " + sin(3*pi*x) + cos(3*pi*x) + 1"),
    "heat-ood": "5*x + 3*sin(4*pi*x)",
    "burgers-a": "-0.9*x + 1.1",
    "burgers-b": "-0.2*x + 1.8",
}


def resolve_ic(text: str) -> ICSample:
    """A named condition or an expression."""
    if text in NAMED_ICS:
        return parse_ic_expression(NAMED_ICS[text]).model_copy(update={"label": text})
    return parse_ic_expression(text)
