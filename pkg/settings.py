"""
Run configuration (TOML files) and environment settings.

Every section has defaults matching the full-scale hyperparameters, so an
empty file describes a complete heat-equation run.
"""

import logging
import sys
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from checkpoint import ModelKind
from deeponet import DeepONetModel, DeepONetSpec
from eval_finetune import FinetuneConfig
from nets import Activation, HypernetSpec, NprModel, SolutionModel
from problems import IbvpSpec, SamplerConfig
from training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A config file is missing, unreadable or inconsistent."""


class NprSettings(BaseSettings):
    """Process environment, e.g. ``NPR_THREADS=4``."""

    model_config = SettingsConfigDict(env_prefix="NPR_")

    threads: int = Field(1, ge=1)
    log_level: str = "INFO"


class TrainedModel(str, Enum):
    NPR = "npr"
    DEEPONET = "deeponet"


class ModelSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: TrainedModel = TrainedModel.NPR
    # Hypernetwork and low-rank target
    hyper_layers: int = Field(4, ge=1)
    hyper_hidden: int = Field(64, ge=1)
    hyper_activation: Activation = Activation.SIN
    target_layers: int = Field(4, ge=1)
    target_hidden: int = Field(32, ge=1)
    target_activation: Activation = Activation.SIN
    rank: int = Field(4, ge=1)
    # DeepONet baseline
    branch_layers: int = Field(4, ge=1)
    branch_hidden: int = Field(64, ge=1)
    trunk_layers: int = Field(4, ge=1)
    trunk_hidden: int = Field(32, ge=1)
    p_lat: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _check_rank(self) -> "ModelSection":
        if self.rank > self.target_hidden:
            raise ValueError(f"rank {self.rank} exceeds target_hidden {self.target_hidden}")
        return self


class ConstraintSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hardcode_ic: bool = True
    hardcode_bc: bool = True
    # Baseline trained with soft losses instead
    hardcode_baseline: bool = True


class EvaluationSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_ics: int = Field(12, ge=1)
    nt: int = Field(500, ge=2)
    nx: int = Field(500, ge=2)
    substeps: int = Field(4, ge=1)
    seed: int = 1234


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    problem: IbvpSpec = IbvpSpec()
    sampler: SamplerConfig = SamplerConfig()
    model: ModelSection = ModelSection()
    constraints: ConstraintSection = ConstraintSection()
    training: TrainConfig = TrainConfig()
    evaluation: EvaluationSection = EvaluationSection()
    finetune: FinetuneConfig = FinetuneConfig()
    seed: int = 0
    d_enc: int = Field(32, ge=2)
    output_dir: Path = Path("runs")

    def hypernet_spec(self) -> HypernetSpec:
        m = self.model
        return HypernetSpec.build(
            d_enc=self.d_enc, hyper_layers=m.hyper_layers, hyper_hidden=m.hyper_hidden,
            target_layers=m.target_layers, target_hidden=m.target_hidden, rank=m.rank,
            hyper_activation=m.hyper_activation, target_activation=m.target_activation,
        )

    def deeponet_spec(self) -> DeepONetSpec:
        m = self.model
        return DeepONetSpec.build(
            d_enc=self.d_enc, p_lat=m.p_lat, branch_layers=m.branch_layers,
            branch_hidden=m.branch_hidden, trunk_layers=m.trunk_layers,
            trunk_hidden=m.trunk_hidden, activation=m.hyper_activation,
        )

    def build_model(self) -> SolutionModel:
        if self.model.kind == TrainedModel.DEEPONET:
            return DeepONetModel(self.deeponet_spec())
        return NprModel(self.hypernet_spec())

    @property
    def model_kind(self) -> ModelKind:
        return ModelKind(self.model.kind.value)

    def train_config(self) -> TrainConfig:
        """Training section with the run seed and constraint switches applied."""
        hardcode_ic, hardcode_bc = self.constraints.hardcode_ic, self.constraints.hardcode_bc
        if self.model.kind == TrainedModel.DEEPONET and not self.constraints.hardcode_baseline:
            hardcode_ic = hardcode_bc = False
        return self.training.model_copy(
            update={"seed": self.seed, "hardcode_ic": hardcode_ic, "hardcode_bc": hardcode_bc})

    def with_overrides(self, **changes) -> "RunConfig":
        """Copy with top-level or dotted (``section.field``) values replaced, revalidated."""
        data = self.model_dump()
        for key, value in changes.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if name:
                data[section][name] = value
            else:
                data[section] = value
        return RunConfig.model_validate(data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        try:
            with path.open("rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        config = cls.model_validate(raw)
        logger.debug("Loaded config %s", path)
        return config


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """The file's config, or all defaults when no path is given."""
    return RunConfig() if path is None else RunConfig.from_file(path)


def format_validation_error(error: ValidationError) -> str:
    """One line per failing field: ``section.field: message``."""
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "\n".join(lines)
