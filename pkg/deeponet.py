"""
Physics-informed DeepONet baseline: a branch network on the sensors and a
trunk network on (t, x), combined by a dot product over the latent axis.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from autodiff import value_of
from nets import (
    Activation,
    ConstraintConfig,
    MlpSpec,
    SolutionModel,
    SpaceTimeField,
    apply_constraints,
    decode_params,
    dense_param_count,
    init_params,
    stack_inputs,
)
from problems import ICBatch

logger = logging.getLogger(__name__)


class DeepONetSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    branch: MlpSpec
    trunk: MlpSpec

    @model_validator(mode="after")
    def _check_latent(self) -> "DeepONetSpec":
        if self.branch.d_output != self.trunk.d_output:
            raise ValueError(
                f"branch and trunk latent sizes differ: {self.branch.d_output} != {self.trunk.d_output}"
            )
        if self.trunk.d_input != 2:
            raise ValueError(f"trunk network must read (t, x), got d_input={self.trunk.d_input}")
        return self

    @property
    def p_lat(self) -> int:
        return self.trunk.d_output

    @property
    def d_enc(self) -> int:
        return self.branch.d_input

    @classmethod
    def build(cls, d_enc: int = 32, p_lat: int = 32, branch_layers: int = 4, branch_hidden: int = 64,
              trunk_layers: int = 4, trunk_hidden: int = 32,
              activation: Activation = Activation.SIN) -> "DeepONetSpec":
        return cls(
            branch=MlpSpec(d_input=d_enc, d_output=p_lat, n_hidden=branch_layers,
                           d_hidden=branch_hidden, activation=activation),
            trunk=MlpSpec(d_input=2, d_output=p_lat, n_hidden=trunk_layers,
                          d_hidden=trunk_hidden, activation=activation),
        )


def deeponet_param_counts(spec: DeepONetSpec) -> Tuple[int, int]:
    """(n_trunk, n_branch)"""
    return dense_param_count(spec.trunk), dense_param_count(spec.branch)


class DeepONetModel(SolutionModel):
    """Parameters are laid out branch first, then trunk."""

    kind = "deeponet"

    def __init__(self, spec: DeepONetSpec):
        self.spec = spec
        self._n_branch = dense_param_count(spec.branch)

    @property
    def d_enc(self) -> int:
        return self.spec.d_enc

    def param_count(self) -> int:
        return sum(deeponet_param_counts(self.spec))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([init_params(self.spec.branch, rng), init_params(self.spec.trunk, rng)])

    def split(self, params):
        """(branch_params, trunk_params) views of a flat vector."""
        size = np.shape(value_of(params))[-1]
        if size != self.param_count():
            raise ValueError(f"Parameter vector has length {size}, expected {self.param_count()}")
        return params[..., :self._n_branch], params[..., self._n_branch:]

    def bind(self, params, sensors: np.ndarray) -> SpaceTimeField:
        sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
        if sensors.shape[-1] != self.d_enc:
            raise ValueError(f"Expected {self.d_enc} sensors, got {sensors.shape[-1]}")
        branch_params, trunk_params = self.split(params)
        coefficients = decode_params(branch_params, self.spec.branch)(sensors)
        trunk = decode_params(trunk_params, self.spec.trunk)

        def field(t, x):
            basis = trunk(stack_inputs(t, x))
            # (B, p) coefficients broadcast against (..., p) basis values
            return (basis * _align(coefficients, np.ndim(value_of(_payload(basis))))).sum(-1)

        return field


def _payload(out):
    return getattr(out, "val", out)


def _align(coefficients, ndim: int):
    """Insert axes so (B, p) lines up with a basis of rank ``ndim``."""
    extra = ndim - 2
    if extra <= 0:
        return coefficients
    batch, p = np.shape(value_of(coefficients))
    return coefficients.reshape((batch,) + (1,) * extra + (p,))


def deeponet_eval(params, sensors: np.ndarray, t, x, spec: DeepONetSpec,
                  constraints: Optional[ConstraintConfig] = None, u0: Optional[ICBatch] = None):
    """Branch . trunk, wrapped by the hard constraints when given."""
    raw = DeepONetModel(spec).bind(params, sensors)(t, x)
    if constraints is None:
        return raw
    if u0 is None:
        raise ValueError("Hard constraints need the initial condition")
    return apply_constraints(raw, t, x, u0, constraints)
