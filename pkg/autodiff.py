"""
Differentiation engine for physics-informed losses.

Two layers that compose:

* ``Tape`` / ``Var`` - reverse-mode recording of numpy array operations,
  used for gradients of scalar losses w.r.t. network parameters.
* ``Jet2`` - truncated Taylor arithmetic (value, first and second
  directional coefficients) over any payload: floats, numpy arrays or
  tape variables. A jet of tape variables keeps the derivative
  coefficients differentiable w.r.t. the parameters.
"""

import logging
from enum import Enum
from typing import Any, Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class DomainError(ZeroDivisionError):
    """Division by a value (or jet value) that is exactly zero."""


class NonFiniteLossError(FloatingPointError):
    """A loss evaluated to NaN or infinity."""

    def __init__(self, value: float):
        super().__init__(f"Loss is not finite: {value!r}")
        self.value = value


class Node(NamedTuple):
    kind: str
    parents: Tuple[int, ...]
    vjps: Tuple[Callable[[np.ndarray], np.ndarray], ...]


class Tape:
    """Arena of recorded operations. One tape per forward pass."""

    def __init__(self):
        self._nodes: List[Node] = []
        self._values: List[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, value: Any) -> "Var":
        """Register a leaf variable."""
        return self._push("leaf", np.asarray(value, dtype=np.float64), (), ())

    def _push(self, kind, value, parents, vjps) -> "Var":
        self._nodes.append(Node(kind, tuple(parents), tuple(vjps)))
        self._values.append(value)
        return Var(self, len(self._nodes) - 1, value)

    def record(self, kind: str, value: np.ndarray, edges) -> "Var":
        parents, vjps = [], []
        for operand, vjp in edges:
            if operand.tape is not self:
                raise ValueError("Cannot mix variables from different tapes")
            parents.append(operand.index)
            vjps.append(vjp)
        return self._push(kind, value, parents, vjps)

    def backward(self, output: "Var", wrt: Sequence["Var"]) -> List[np.ndarray]:
        """Adjoints of a scalar output w.r.t. the given variables."""
        if output.tape is not self:
            raise ValueError("Output does not belong to this tape")
        if np.size(output.value) != 1:
            raise ValueError(f"backward needs a scalar output, got shape {np.shape(output.value)}")

        adjoints: List[Optional[np.ndarray]] = [None] * len(self._nodes)
        adjoints[output.index] = np.ones_like(output.value)
        # Operands always precede their results, so a reverse sweep is enough
        for index in range(output.index, -1, -1):
            g = adjoints[index]
            if g is None:
                continue
            node = self._nodes[index]
            for parent, vjp in zip(node.parents, node.vjps):
                contribution = vjp(g)
                if adjoints[parent] is None:
                    adjoints[parent] = contribution
                else:
                    adjoints[parent] = adjoints[parent] + contribution

        logger.debug("Backward pass over %d nodes", len(self._nodes))
        return [
            np.zeros_like(v.value) if adjoints[v.index] is None else np.asarray(adjoints[v.index])
            for v in wrt
        ]

    def clear(self) -> None:
        self._nodes.clear()
        self._values.clear()


class Var:
    """A recorded array value. Arithmetic on it extends its tape."""

    __slots__ = ("tape", "index", "value")
    # Make numpy hand mixed expressions back to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"

    def __add__(self, other):
        return NotImplemented if isinstance(other, Jet2) else add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return NotImplemented if isinstance(other, Jet2) else sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return NotImplemented if isinstance(other, Jet2) else mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return NotImplemented if isinstance(other, Jet2) else div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


Payload = Union[float, np.ndarray, Var]


def value_of(x: Any) -> np.ndarray:
    """Plain numeric value of a payload."""
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the operand's shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(kind: str, value, *edges):
    """Record a node if any operand is a tape variable, else pass the value through."""
    live = [(operand, vjp) for operand, vjp in edges if isinstance(operand, Var)]
    if not live:
        return value
    return live[0][0].tape.record(kind, np.asarray(value, dtype=np.float64), live)


# Primitive operations over payloads

def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("add", av + bv,
                   (a, lambda g: _unbroadcast(g, sa)),
                   (b, lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("sub", av - bv,
                   (a, lambda g: _unbroadcast(g, sa)),
                   (b, lambda g: -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("mul", av * bv,
                   (a, lambda g: _unbroadcast(g * bv, sa)),
                   (b, lambda g: _unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if np.any(np.asarray(bv) == 0):
        raise DomainError("Division by zero")
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _record("div", out,
                   (a, lambda g: _unbroadcast(g / bv, sa)),
                   (b, lambda g: _unbroadcast(-g * out / bv, sb)))


def power(x, exponent: float):
    if isinstance(exponent, (Var, Jet2)):
        raise TypeError("Only constant exponents are supported")
    if isinstance(x, Jet2):
        return x ** exponent
    xv = value_of(x)
    if exponent < 0 and np.any(np.asarray(xv) == 0):
        raise DomainError(f"Negative power {exponent} of zero")
    return _record("power", xv ** exponent,
                   (x, lambda g: g * exponent * xv ** (exponent - 1)))


def square(x):
    if isinstance(x, Jet2):
        return x * x
    xv = value_of(x)
    return _record("square", xv * xv, (x, lambda g: 2.0 * g * xv))


def sin(x):
    if isinstance(x, Jet2):
        return x.sin()
    xv = value_of(x)
    return _record("sin", np.sin(xv), (x, lambda g: g * np.cos(xv)))


def cos(x):
    if isinstance(x, Jet2):
        return x.cos()
    xv = value_of(x)
    return _record("cos", np.cos(xv), (x, lambda g: -g * np.sin(xv)))


def exp(x):
    if isinstance(x, Jet2):
        return x.exp()
    xv = value_of(x)
    out = np.exp(xv)
    return _record("exp", out, (x, lambda g: g * out))


def tanh(x):
    if isinstance(x, Jet2):
        return x.tanh()
    xv = value_of(x)
    out = np.tanh(xv)
    return _record("tanh", out, (x, lambda g: g * (1.0 - out * out)))


def relu(x):
    if isinstance(x, Jet2):
        return x.relu()
    xv = value_of(x)
    mask = (np.asarray(xv) > 0).astype(np.float64)
    return _record("relu", xv * mask, (x, lambda g: g * mask))


def absolute(x):
    xv = value_of(x)
    return _record("abs", np.abs(xv), (x, lambda g: g * np.sign(xv)))


def take(x, key):
    """Basic (slice/integer) indexing."""
    xv = value_of(x)
    shape = np.shape(xv)

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return full

    return _record("take", np.asarray(xv)[key], (x, vjp))


def reshape(x, shape):
    xv = value_of(x)
    original = np.shape(xv)
    return _record("reshape", np.reshape(xv, shape), (x, lambda g: np.reshape(g, original)))


def reduce_sum(x, axis: Optional[int] = None):
    if isinstance(x, Jet2):
        return x.sum(axis)
    xv = np.asarray(value_of(x))
    shape = xv.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _record("sum", xv.sum(axis=axis), (x, vjp))


def reduce_mean(x, axis: Optional[int] = None):
    xv = np.asarray(value_of(x))
    count = xv.size if axis is None else xv.shape[axis]
    return reduce_sum(x, axis) * (1.0 / count)


def bmv(weight, h):
    """Matrix-vector product over the last axis.

    ``weight`` is either shared, shape (o, i), or batched, shape (..., o, i),
    in which case its leading axes broadcast against those of ``h`` (..., i).
    """
    if isinstance(h, Jet2):
        return Jet2(bmv(weight, h.val), bmv(weight, h.d1),
                    None if h.d2 is None else bmv(weight, h.d2))
    wv, hv = value_of(weight), np.asarray(value_of(h))
    wshape, hshape = np.shape(wv), hv.shape

    if np.ndim(wv) == 2:
        out = hv @ np.transpose(wv)
        vjp_w = lambda g: np.reshape(g, (-1, wshape[0])).T @ np.reshape(hv, (-1, wshape[1]))
        vjp_h = lambda g: _unbroadcast(g @ wv, hshape)
    else:
        out = np.matmul(wv, hv[..., None])[..., 0]
        vjp_w = lambda g: _unbroadcast(g[..., :, None] * hv[..., None, :], wshape)
        vjp_h = lambda g: _unbroadcast(np.matmul(g[..., None, :], wv)[..., 0, :], hshape)
    return _record("bmv", out, (weight, vjp_w), (h, vjp_h))


def affine(weight, h, bias=None):
    """``weight @ h + bias`` with jets propagating through the linear part only."""
    if isinstance(h, Jet2):
        return Jet2(affine(weight, h.val, bias), bmv(weight, h.d1),
                    None if h.d2 is None else bmv(weight, h.d2))
    out = bmv(weight, h)
    return out if bias is None else add(out, bias)


# Truncated Taylor arithmetic

class Jet2:
    """``f(x + eps*s) = val + d1*eps + d2*eps^2/2 + O(eps^3)``.

    ``d2`` may be ``None`` for first-order-only jets, which skip all
    second-order work.
    """

    __slots__ = ("val", "d1", "d2")
    __array_ufunc__ = None

    def __init__(self, val, d1=0.0, d2=0.0):
        self.val = val
        self.d1 = d1
        self.d2 = d2

    def __repr__(self) -> str:
        return f"Jet2(val={self.val!r}, d1={self.d1!r}, d2={self.d2!r})"

    @property
    def order(self) -> int:
        return 1 if self.d2 is None else 2

    def _chain(self, f, f1, f2) -> "Jet2":
        """Compose with a scalar function given f, f' and f'' at ``val``."""
        d1 = f1 * self.d1
        if self.d2 is None:
            return Jet2(f, d1, None)
        return Jet2(f, d1, f1 * self.d2 + f2 * (self.d1 * self.d1))

    def __add__(self, other):
        if isinstance(other, Jet2):
            d2 = None if self.d2 is None or other.d2 is None else self.d2 + other.d2
            return Jet2(self.val + other.val, self.d1 + other.d1, d2)
        return Jet2(self.val + other, self.d1, self.d2)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.val, -self.d1, None if self.d2 is None else -self.d2)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet2):
            d1 = self.d1 * other.val + self.val * other.d1
            if self.d2 is None or other.d2 is None:
                return Jet2(self.val * other.val, d1, None)
            d2 = self.d2 * other.val + 2.0 * (self.d1 * other.d1) + self.val * other.d2
            return Jet2(self.val * other.val, d1, d2)
        return Jet2(self.val * other, self.d1 * other,
                    None if self.d2 is None else self.d2 * other)

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet2":
        if np.any(np.asarray(value_of(self.val)) == 0):
            raise DomainError("Division by a jet with zero value")
        inv = 1.0 / self.val
        inv2 = inv * inv
        return self._chain(inv, -inv2, 2.0 * inv2 * inv)

    def __truediv__(self, other):
        if isinstance(other, Jet2):
            return self * other.reciprocal()
        if np.any(np.asarray(value_of(other)) == 0):
            raise DomainError("Division of a jet by zero")
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, exponent: float):
        if exponent < 0 and np.any(np.asarray(value_of(self.val)) == 0):
            raise DomainError(f"Negative power {exponent} of a zero jet")
        if exponent == 2:
            return self * self
        v = self.val
        return self._chain(v ** exponent,
                           exponent * v ** (exponent - 1),
                           exponent * (exponent - 1) * v ** (exponent - 2))

    def sin(self) -> "Jet2":
        s, c = sin(self.val), cos(self.val)
        return self._chain(s, c, -s)

    def cos(self) -> "Jet2":
        s, c = sin(self.val), cos(self.val)
        return self._chain(c, -s, -c)

    def exp(self) -> "Jet2":
        e = exp(self.val)
        return self._chain(e, e, e)

    def tanh(self) -> "Jet2":
        y = tanh(self.val)
        dy = 1.0 - y * y
        return self._chain(y, dy, -2.0 * y * dy)

    def relu(self) -> "Jet2":
        mask = (np.asarray(value_of(self.val)) > 0).astype(np.float64)
        return Jet2(relu(self.val), self.d1 * mask,
                    None if self.d2 is None else self.d2 * mask)

    def sum(self, axis: Optional[int] = None) -> "Jet2":
        def _sum(p):
            if isinstance(p, (Var, np.ndarray)) and np.ndim(value_of(p)) > 0:
                return reduce_sum(p, axis)
            return p
        return Jet2(_sum(self.val), _sum(self.d1), None if self.d2 is None else _sum(self.d2))

    def __getitem__(self, key) -> "Jet2":
        def _take(p):
            return p[key] if np.ndim(value_of(p)) > 0 else p
        return Jet2(_take(self.val), _take(self.d1), None if self.d2 is None else _take(self.d2))


class Axis(str, Enum):
    T = "t"
    X = "x"


def lift(value, order: int = 2) -> Jet2:
    """Constant jet: no dependence on the seeded direction."""
    zero = np.zeros_like(value, dtype=np.float64) if np.ndim(value) else 0.0
    return Jet2(value, zero, zero if order == 2 else None)


def jet_seed(value, order: int = 2) -> Jet2:
    """Jet of the seeded coordinate itself: (value, 1, 0)."""
    one = np.ones_like(value, dtype=np.float64) if np.ndim(value) else 1.0
    zero = np.zeros_like(value, dtype=np.float64) if np.ndim(value) else 0.0
    return Jet2(value, one, zero if order == 2 else None)


def seed_inputs(t, x, along: Axis, order: int = 2) -> Tuple[Jet2, Jet2]:
    """Jets for (t, x) with the unit seed along one coordinate."""
    if along == Axis.T:
        return jet_seed(t, order), lift(x, order)
    return lift(t, order), jet_seed(x, order)


_JET_FUNCTIONS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "sin": lambda a: a.sin(),
    "cos": lambda a: a.cos(),
    "exp": lambda a: a.exp(),
    "tanh": lambda a: a.tanh(),
    "power": lambda a, p: a ** p,
    "square": lambda a: a * a,
}


def jet_apply(name: str, *args) -> Jet2:
    """Apply a named elementary function to jets (constants are lifted)."""
    try:
        fn = _JET_FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"Unsupported jet function: {name}") from None
    if name == "power":
        base, exponent = args
        return fn(base if isinstance(base, Jet2) else lift(base), exponent)
    jets = [a if isinstance(a, Jet2) else lift(a) for a in args]
    return fn(*jets)


class Derivatives(NamedTuple):
    u: Payload
    u_t: Payload
    u_x: Payload
    u_xx: Optional[Payload]


def directional_derivs(net_eval: Callable[[Jet2, Jet2], Jet2], t, x,
                       x_order: int = 2) -> Derivatives:
    """u, u_t, u_x and (if ``x_order`` is 2) u_xx via two seeded passes.

    The t pass is first order only; ``net_eval`` must map a pair of jets
    to a jet. Payloads of the results stay on the tape when the network
    parameters are tape variables.
    """
    t_jets = seed_inputs(t, x, Axis.T, order=1)
    out_t = net_eval(*t_jets)
    x_jets = seed_inputs(t, x, Axis.X, order=x_order)
    out_x = net_eval(*x_jets)
    return Derivatives(out_x.val, out_t.d1, out_x.d1, out_x.d2)


# Gradients

def value_and_grad(loss: Callable[[Var], Var], at: np.ndarray) -> Tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. a flat parameter vector."""
    tape = Tape()
    params = tape.variable(np.array(at, dtype=np.float64, copy=True))
    out = loss(params)
    if not isinstance(out, Var):
        # Loss does not depend on the parameters
        value = float(np.asarray(out))
        if not np.isfinite(value):
            raise NonFiniteLossError(value)
        return value, np.zeros_like(params.value)

    value = float(np.asarray(out.value))
    if not np.isfinite(value):
        raise NonFiniteLossError(value)
    (g,) = tape.backward(out, [params])
    tape.clear()
    return value, g


def grad(loss: Callable[[Var], Var], at: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. a flat parameter vector."""
    return value_and_grad(loss, at)[1]
