"""
Checkpoint container.

Layout on disk:

    NPRCKPT\n
    <manifest JSON on one line>\n
    <parameters as little-endian float64>

The manifest records the format version, model kind, every spec, the
training seed and step count, and a sha256 checksum of the parameter block.
"""

import hashlib
import logging
import os
import tempfile
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from deeponet import DeepONetModel, DeepONetSpec
from nets import ConstraintConfig, DensePinnModel, HypernetSpec, MlpSpec, NprModel, SolutionModel
from problems import IbvpSpec, ICSample

logger = logging.getLogger(__name__)

MAGIC = b"NPRCKPT\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointFormatError(ValueError):
    """Bad magic, version, checksum or parameter length."""


class ModelKind(str, Enum):
    NPR = "npr"
    DEEPONET = "deeponet"
    DENSE_PINN = "dense_pinn"


_SPEC_TYPES = {
    ModelKind.NPR: HypernetSpec,
    ModelKind.DEEPONET: DeepONetSpec,
    ModelKind.DENSE_PINN: MlpSpec,
}

ModelSpec = Union[HypernetSpec, DeepONetSpec, MlpSpec]


def build_model(kind: ModelKind, spec: ModelSpec, d_enc: int) -> SolutionModel:
    if not isinstance(spec, _SPEC_TYPES[kind]):
        raise ValueError(f"{kind.value} models need a {_SPEC_TYPES[kind].__name__}, got {type(spec).__name__}")
    if kind == ModelKind.NPR:
        return NprModel(spec)
    if kind == ModelKind.DEEPONET:
        return DeepONetModel(spec)
    return DensePinnModel(spec, d_enc=d_enc)


class Checkpoint(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: ModelKind
    problem: IbvpSpec
    spec: ModelSpec
    constraints: ConstraintConfig
    d_enc: int
    params: np.ndarray
    seed: int = 0
    steps: int = 0
    # Initial condition a dense PINN was fine-tuned for
    ic: Optional[ICSample] = None

    @model_validator(mode="after")
    def _check_params(self) -> "Checkpoint":
        expected = self.model().param_count()
        if self.params.ndim != 1 or self.params.size != expected:
            raise ValueError(f"Checkpoint holds {self.params.size} parameters, expected {expected}")
        if self.kind == ModelKind.DENSE_PINN and self.ic is None:
            raise ValueError("Dense PINN checkpoints must record their initial condition")
        return self

    def model(self) -> SolutionModel:
        return build_model(self.kind, self.spec, self.d_enc)

    def replace(self, **changes) -> "Checkpoint":
        data = {name: getattr(self, name) for name in type(self).model_fields}
        data.update(changes)
        return type(self)(**data)


class _Manifest(BaseModel):
    format_version: int
    kind: ModelKind
    problem: IbvpSpec
    spec: Dict[str, Any]
    constraints: ConstraintConfig
    d_enc: int
    seed: int
    steps: int
    ic: Optional[ICSample] = None
    param_count: int
    sha256: str


def dumps(checkpoint: Checkpoint) -> bytes:
    block = np.ascontiguousarray(checkpoint.params, dtype=_DTYPE).tobytes()
    manifest = _Manifest(
        format_version=FORMAT_VERSION,
        kind=checkpoint.kind,
        problem=checkpoint.problem,
        spec=checkpoint.spec.model_dump(mode="json"),
        constraints=checkpoint.constraints,
        d_enc=checkpoint.d_enc,
        seed=checkpoint.seed,
        steps=checkpoint.steps,
        ic=checkpoint.ic,
        param_count=checkpoint.params.size,
        sha256=hashlib.sha256(block).hexdigest(),
    )
    return MAGIC + manifest.model_dump_json().encode("utf-8") + b"\n" + block


def loads(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointFormatError("Not a checkpoint file (bad magic)")
    head, sep, block = data[len(MAGIC):].partition(b"\n")
    if not sep:
        raise CheckpointFormatError("Truncated checkpoint: no manifest terminator")
    try:
        manifest = _Manifest.model_validate_json(head)
    except ValidationError as e:
        raise CheckpointFormatError(f"Invalid checkpoint manifest: {e}") from e

    if manifest.format_version != FORMAT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {manifest.format_version}")
    if len(block) != manifest.param_count * _DTYPE.itemsize:
        raise CheckpointFormatError(
            f"Parameter block has {len(block)} bytes, expected {manifest.param_count * _DTYPE.itemsize}"
        )
    if hashlib.sha256(block).hexdigest() != manifest.sha256:
        raise CheckpointFormatError("Parameter block checksum mismatch")

    try:
        spec = _SPEC_TYPES[manifest.kind].model_validate(manifest.spec)
        return Checkpoint(
            kind=manifest.kind,
            problem=manifest.problem,
            spec=spec,
            constraints=manifest.constraints,
            d_enc=manifest.d_enc,
            params=np.frombuffer(block, dtype=_DTYPE).astype(np.float64),
            seed=manifest.seed,
            steps=manifest.steps,
            ic=manifest.ic,
        )
    except ValidationError as e:
        raise CheckpointFormatError(f"Inconsistent checkpoint: {e}") from e


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(dumps(checkpoint))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info("Saved %s checkpoint (%d parameters) to %s", checkpoint.kind.value,
                checkpoint.params.size, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return loads(path.read_bytes())
