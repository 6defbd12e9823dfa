"""
MLPs, low-rank MLPs and the hypernetwork -> target-network composition.

Parameters live in flat vectors with a fixed canonical layout:
input layer (weights row-major, bias), then each hidden transition
(dense: W, bias; low-rank: A, B, bias), then the output layer
(weights, bias). A leading batch axis on the flat vector yields a batch
of networks.
"""

import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Callable, ClassVar, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from autodiff import Jet2, Var, affine, bmv, relu, sin, tanh, value_of
from problems import BoundaryKind, IbvpSpec, ICBatch

logger = logging.getLogger(__name__)


class Activation(str, Enum):
    SIN = "sin"
    TANH = "tanh"
    RELU = "relu"


_ACTIVATIONS = {
    Activation.SIN: sin,
    Activation.TANH: tanh,
    Activation.RELU: relu,
}


class MlpSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_input: int = Field(ge=1)
    d_output: int = Field(ge=1)
    n_hidden: int = Field(ge=1)
    d_hidden: int = Field(ge=1)
    activation: Activation = Activation.SIN


class LowRankMlpSpec(BaseModel):
    """MLP whose hidden-to-hidden weights are A_i @ B_i of rank at most r."""

    model_config = ConfigDict(frozen=True)

    base: MlpSpec
    rank: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_rank(self) -> "LowRankMlpSpec":
        if self.rank > self.base.d_hidden:
            raise ValueError(f"rank {self.rank} exceeds hidden dimension {self.base.d_hidden}")
        return self


NetSpec = Union[MlpSpec, LowRankMlpSpec]


def dense_param_count(spec: MlpSpec) -> int:
    d_in, d_out, n_h, d_h = spec.d_input, spec.d_output, spec.n_hidden, spec.d_hidden
    return d_in * d_h + d_h + (n_h - 1) * (d_h * d_h + d_h) + d_h * d_out + d_out


def lowrank_param_count(spec: LowRankMlpSpec) -> int:
    base, r = spec.base, spec.rank
    d_in, d_out, n_h, d_h = base.d_input, base.d_output, base.n_hidden, base.d_hidden
    return d_in * d_h + d_h + (n_h - 1) * (2 * r * d_h + d_h) + d_h * d_out + d_out


def param_count(spec: NetSpec) -> int:
    if isinstance(spec, LowRankMlpSpec):
        return lowrank_param_count(spec)
    return dense_param_count(spec)


class HypernetSpec(BaseModel):
    """Hypernetwork on d_enc sensors emitting all parameters of the target."""

    model_config = ConfigDict(frozen=True)

    hyper: MlpSpec
    target: LowRankMlpSpec

    @model_validator(mode="after")
    def _check_shapes(self) -> "HypernetSpec":
        expected = lowrank_param_count(self.target)
        if self.hyper.d_output != expected:
            raise ValueError(
                f"hypernetwork output {self.hyper.d_output} != target parameter count {expected}"
            )
        if self.target.base.d_input != 2 or self.target.base.d_output != 1:
            raise ValueError("target network must map (t, x) to a scalar")
        return self

    @classmethod
    def build(cls, d_enc: int = 32, hyper_layers: int = 4, hyper_hidden: int = 64,
              target_layers: int = 4, target_hidden: int = 32, rank: int = 4,
              hyper_activation: Activation = Activation.SIN,
              target_activation: Activation = Activation.SIN) -> "HypernetSpec":
        target = LowRankMlpSpec(
            base=MlpSpec(d_input=2, d_output=1, n_hidden=target_layers,
                         d_hidden=target_hidden, activation=target_activation),
            rank=rank,
        )
        hyper = MlpSpec(d_input=d_enc, d_output=lowrank_param_count(target),
                        n_hidden=hyper_layers, d_hidden=hyper_hidden,
                        activation=hyper_activation)
        return cls(hyper=hyper, target=target)

    @property
    def d_enc(self) -> int:
        return self.hyper.d_input


# Hidden (d_h, r) settings of the ablation over target networks
ABLATION_TARGETS: Tuple[Tuple[int, int], ...] = ((32, 4), (32, 8), (32, 16), (64, 4), (64, 8), (64, 16))


# Canonical layout

class Block(NamedTuple):
    name: str
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout(spec: NetSpec) -> List[Block]:
    """Ordered parameter blocks of a network."""
    base = spec.base if isinstance(spec, LowRankMlpSpec) else spec
    d_h = base.d_hidden
    blocks = [Block("W0", (d_h, base.d_input)), Block("b0", (d_h,))]
    for i in range(1, base.n_hidden):
        if isinstance(spec, LowRankMlpSpec):
            blocks.append(Block(f"A{i}", (d_h, spec.rank)))
            blocks.append(Block(f"B{i}", (spec.rank, d_h)))
        else:
            blocks.append(Block(f"W{i}", (d_h, d_h)))
        blocks.append(Block(f"b{i}", (d_h,)))
    blocks.append(Block("W_out", (base.d_output, d_h)))
    blocks.append(Block("b_out", (base.d_output,)))
    return blocks


class Layer(NamedTuple):
    weight: object            # (.., o, i) or None for low-rank layers
    bias: object              # (.., o)
    a: object = None          # (.., d_h, r)
    b: object = None          # (.., r, d_h)

    def apply(self, h):
        if self.weight is not None:
            return affine(self.weight, h, self.bias)
        return affine(self.a, bmv(self.b, h), self.bias)


class MlpWeights:
    """A decoded network. Calling it runs the forward pass."""

    def __init__(self, spec: NetSpec, layers: List[Layer]):
        self.spec = spec
        self.layers = layers
        base = spec.base if isinstance(spec, LowRankMlpSpec) else spec
        self._activation = _ACTIVATIONS[base.activation]

    def __call__(self, inputs):
        h = inputs
        for layer in self.layers[:-1]:
            h = self._activation(layer.apply(h))
        return self.layers[-1].apply(h)


def _leading_shape(flat) -> Tuple[int, ...]:
    return tuple(np.shape(value_of(flat)))[:-1]


def decode_params(flat, spec: NetSpec) -> MlpWeights:
    """Reshape a flat vector (or batch of vectors) into a callable network."""
    expected = param_count(spec)
    size = np.shape(value_of(flat))[-1] if np.ndim(value_of(flat)) else 0
    if size != expected:
        raise ValueError(f"Parameter vector has length {size}, expected {expected}")

    lead = _leading_shape(flat)
    parts = {}
    offset = 0
    for block in layout(spec):
        chunk = flat[..., offset:offset + block.size]
        parts[block.name] = chunk.reshape(lead + block.shape)
        offset += block.size

    base = spec.base if isinstance(spec, LowRankMlpSpec) else spec
    layers = [Layer(parts["W0"], parts["b0"])]
    for i in range(1, base.n_hidden):
        if isinstance(spec, LowRankMlpSpec):
            layers.append(Layer(None, parts[f"b{i}"], parts[f"A{i}"], parts[f"B{i}"]))
        else:
            layers.append(Layer(parts[f"W{i}"], parts[f"b{i}"]))
    layers.append(Layer(parts["W_out"], parts["b_out"]))
    return MlpWeights(spec, layers)


def encode_params(net: MlpWeights) -> np.ndarray:
    """Inverse of ``decode_params`` for plain-array networks."""
    chunks = []
    base = net.spec.base if isinstance(net.spec, LowRankMlpSpec) else net.spec
    for layer in net.layers:
        lead = np.shape(layer.bias)[:-1]
        if layer.weight is None:
            chunks.append(np.reshape(layer.a, lead + (-1,)))
            chunks.append(np.reshape(layer.b, lead + (-1,)))
        else:
            chunks.append(np.reshape(layer.weight, lead + (-1,)))
        chunks.append(np.reshape(layer.bias, lead + (-1,)))
    flat = np.concatenate(chunks, axis=-1)
    if flat.shape[-1] != param_count(net.spec):
        raise ValueError(f"Network of {base.n_hidden} hidden layers does not match its spec")
    return flat


def forward(spec: NetSpec, params, inputs):
    """Run a network on inputs of shape (..., d_input)."""
    return decode_params(params, spec)(inputs)


def init_params(spec: NetSpec, rng: np.random.Generator, output_scale: float = 1.0) -> np.ndarray:
    """Scaled-uniform fan-in/fan-out weights, zero biases.

    ``output_scale`` multiplies the output-layer weights.
    """
    chunks = []
    blocks = layout(spec)
    for block in blocks:
        if len(block.shape) == 1:
            chunks.append(np.zeros(block.size))
            continue
        fan_out, fan_in = block.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        values = rng.uniform(-bound, bound, size=block.size)
        if block.name == "W_out":
            values = values * output_scale
        chunks.append(values)
    return np.concatenate(chunks)


def unfold_lowrank(flat: np.ndarray, spec: LowRankMlpSpec) -> Tuple[MlpSpec, np.ndarray]:
    """Dense network computing the same function: W_i = A_i @ B_i."""
    net = decode_params(np.asarray(flat, dtype=np.float64), spec)
    layers = []
    for layer in net.layers:
        if layer.weight is None:
            layers.append(Layer(np.matmul(layer.a, layer.b), layer.bias))
        else:
            layers.append(layer)
    return spec.base, encode_params(MlpWeights(spec.base, layers))


# Hard constraints

class ConstraintMode(str, Enum):
    HARDCODED = "hardcoded"
    SOFT = "soft"


class ConstraintConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    T_final: float = Field(1.0, gt=0)
    ic_mode: ConstraintMode = ConstraintMode.HARDCODED
    bc_mode: ConstraintMode = ConstraintMode.HARDCODED
    bc_kind: BoundaryKind = BoundaryKind.DIRICHLET_BOTH_ENDS

    @classmethod
    def for_problem(cls, spec: IbvpSpec, hardcode_ic: bool = True,
                    hardcode_bc: bool = True) -> "ConstraintConfig":
        return cls(
            T_final=spec.T_final,
            ic_mode=ConstraintMode.HARDCODED if hardcode_ic else ConstraintMode.SOFT,
            bc_mode=ConstraintMode.HARDCODED if hardcode_bc else ConstraintMode.SOFT,
            bc_kind=spec.bc_kind,
        )

    def beta(self, x):
        """Blend weight toward the left boundary value."""
        return 1.0 - x


def hard_ic(raw, u0_at_x, t, T: float):
    """(t/T) * raw + ((T - t)/T) * u0(x); exactly u0(x) at t = 0."""
    return (t / T) * raw + ((T - t) / T) * u0_at_x


def hard_bc(raw, u_b_at_t, x, beta: Callable):
    """(1 - beta(x)) * raw + beta(x) * u_b(t)"""
    weight = beta(x)
    return (1.0 - weight) * raw + weight * u_b_at_t


def hard_bc_two_sided(raw, x, u_left, u_right):
    """raw * x(1 - x) plus the linear interpolant of both boundary values."""
    return raw * (x * (1.0 - x)) + (1.0 - x) * u_left + x * u_right


def apply_constraints(raw, t, x, ics: ICBatch, constraints: ConstraintConfig):
    """Wrap a raw network output so the hardcoded conditions hold exactly."""
    out = raw
    if constraints.bc_mode == ConstraintMode.HARDCODED:
        u_left, u_right = ics.boundary()
        if constraints.bc_kind == BoundaryKind.DIRICHLET_BOTH_ENDS:
            out = hard_bc_two_sided(out, x, u_left, u_right)
        else:
            out = hard_bc(out, u_left, x, constraints.beta)
    if constraints.ic_mode == ConstraintMode.HARDCODED:
        out = hard_ic(out, ics.evaluate(x), t, constraints.T_final)
    return out


# Models: anything mapping (parameters, sensors) to a field over (t, x)

def stack_inputs(t, x):
    """(t, x) -> inputs of shape (..., 2); jets stack slot by slot."""
    if isinstance(t, Jet2) or isinstance(x, Jet2):
        if not (isinstance(t, Jet2) and isinstance(x, Jet2)):
            raise TypeError("Both coordinates must be jets")
        if isinstance(t.val, Var) or isinstance(x.val, Var):
            raise TypeError("Coordinates are data, not tape variables")

        def _stack(a, b):
            a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
            return np.stack([a, b], axis=-1)

        val = _stack(t.val, x.val)
        d1 = _stack(np.broadcast_to(t.d1, np.shape(t.val)), np.broadcast_to(x.d1, np.shape(x.val)))
        d2 = None
        if t.d2 is not None and x.d2 is not None:
            d2 = _stack(np.broadcast_to(t.d2, np.shape(t.val)), np.broadcast_to(x.d2, np.shape(x.val)))
        return Jet2(val, d1, d2)
    t, x = np.broadcast_arrays(np.asarray(t, dtype=np.float64), np.asarray(x, dtype=np.float64))
    return np.stack([t, x], axis=-1)


def _squeeze_output(out):
    return out[..., 0]


SpaceTimeField = Callable[[object, object], object]


class SolutionModel(ABC):
    """Interface shared by NPR, the DeepONet baseline and dense PINNs."""

    kind: ClassVar[str]

    @property
    @abstractmethod
    def d_enc(self) -> int:
        """Number of sensors the model reads."""

    @abstractmethod
    def param_count(self) -> int:
        """Length of the flat parameter vector."""

    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Fresh parameters."""

    @abstractmethod
    def bind(self, params, sensors: np.ndarray) -> SpaceTimeField:
        """Raw (unconstrained) field for a batch of sensor vectors.

        ``sensors`` has shape (B, d_enc); B = 1 broadcasts against any number
        of query points, otherwise query points pair one-to-one with rows.
        """


class NprModel(SolutionModel):
    kind = "npr"

    def __init__(self, spec: HypernetSpec):
        self.spec = spec

    @property
    def d_enc(self) -> int:
        return self.spec.d_enc

    def param_count(self) -> int:
        return dense_param_count(self.spec.hyper)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        # Small output layer: initial targets are near zero, the model starts at the u0 blend
        return init_params(self.spec.hyper, rng, output_scale=0.01)

    def regress(self, params, sensors: np.ndarray):
        """Target parameters theta = H(sensors), shape (B, p)."""
        sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
        if sensors.shape[-1] != self.d_enc:
            raise ValueError(f"Expected {self.d_enc} sensors, got {sensors.shape[-1]}")
        return forward(self.spec.hyper, params, sensors)

    def target(self, theta) -> MlpWeights:
        return decode_params(theta, self.spec.target)

    def bind(self, params, sensors: np.ndarray) -> SpaceTimeField:
        theta = self.regress(params, sensors)
        if np.shape(value_of(theta))[0] == 1:
            theta = theta[0]
        net = self.target(theta)
        return lambda t, x: _squeeze_output(net(stack_inputs(t, x)))


class DensePinnModel(SolutionModel):
    """A single (unfolded) network; sensors are ignored."""

    kind = "dense_pinn"

    def __init__(self, spec: MlpSpec, d_enc: int = 32):
        self.spec = spec
        self._d_enc = d_enc

    @property
    def d_enc(self) -> int:
        return self._d_enc

    def param_count(self) -> int:
        return dense_param_count(self.spec)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return init_params(self.spec, rng)

    def bind(self, params, sensors: Optional[np.ndarray] = None) -> SpaceTimeField:
        net = decode_params(params, self.spec)
        return lambda t, x: _squeeze_output(net(stack_inputs(t, x)))


def constrained_field(model: SolutionModel, params, ics: ICBatch, sensors: np.ndarray,
                      constraints: ConstraintConfig) -> SpaceTimeField:
    """Model field with the hard-constraint wrappers of ``constraints`` applied."""
    raw = model.bind(params, sensors)
    return lambda t, x: apply_constraints(raw(t, x), t, x, ics, constraints)


def npr_eval(hyper_params, sensors: np.ndarray, t, x, constraints: ConstraintConfig,
             u0: ICBatch, spec: HypernetSpec):
    """Hypernetwork -> decode -> target(t, x) -> constraint wrappers."""
    field = constrained_field(NprModel(spec), hyper_params, u0, sensors, constraints)
    return field(t, x)
