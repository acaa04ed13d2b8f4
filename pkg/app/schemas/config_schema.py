from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.exception.exce import ConfigError
from app.schemas.task_schema import TaskSpec


class Mode(str, Enum):
    zero_shot = "zero_shot"
    st = "st"
    st_vpe = "st_vpe"
    st_lpe = "st_lpe"
    st_vpe_lpe = "st_vpe_lpe"
    pest = "pest"
    baseline_uniform = "baseline_uniform"
    baseline_weighted = "baseline_weighted"
    baseline_vote = "baseline_vote"

    @property
    def uses_lpe(self) -> bool:
        return self in (Mode.st_lpe, Mode.st_vpe_lpe, Mode.pest)

    @property
    def uses_vpe(self) -> bool:
        return self in (Mode.st_vpe, Mode.st_vpe_lpe, Mode.pest)

    @property
    def temporal(self) -> bool:
        return self is Mode.pest


ABLATION_MODES = [Mode.zero_shot, Mode.st, Mode.st_vpe, Mode.st_lpe, Mode.st_vpe_lpe, Mode.pest]
BASELINE_MODES = [Mode.baseline_uniform, Mode.baseline_weighted, Mode.baseline_vote, Mode.pest]
LAMBDA_SWEEP = [0.9, 0.99, 0.999, 0.9999]


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    embed_dim: int = 16
    epochs: int = 40
    batch_size: int = 64
    lr: float = 5e-3
    weight_decay: float = 0.05
    temperature: float = 0.07

    @model_validator(mode="after")
    def _check(self) -> "PretrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"pretrain epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"pretrain batch_size must be >= 2, got {self.batch_size}")
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("need lr > 0 and weight_decay >= 0")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        return self


class AdaptConfig(BaseModel):
    """One adaptation run. lr / weight_decay defaults suit large encoders;
    the shipped YAML raises lr for the desk-scale task."""

    model_config = ConfigDict(extra="forbid")

    mode: Mode = Mode.pest
    tau: float = 0.01
    lam: float = 0.99
    momentum: float = 0.99
    epochs: int = 10
    batch_size: int = 64
    k_views: int = 4
    lr: float = 1e-5
    min_lr: float = 0.0
    weight_decay: float = 0.05
    aug_jitter: float = 0.05
    aug_mask: float = 0.1
    aug_scale_low: float = 0.8
    aug_scale_high: float = 1.2
    eq4_raw_weights: bool = False
    eq7_raw_product: bool = False

    @model_validator(mode="after")
    def _check(self) -> "AdaptConfig":
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.k_views < 1:
            raise ConfigError("batch_size and k_views must be >= 1")
        if not self.lr > 0 or self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError(f"need 0 <= min_lr <= lr, lr > 0; got min_lr={self.min_lr} lr={self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.aug_jitter < 0 or not 0.0 <= self.aug_mask <= 1.0:
            raise ConfigError("aug_jitter must be >= 0 and aug_mask in [0, 1]")
        if not 0.0 < self.aug_scale_low <= self.aug_scale_high:
            raise ConfigError("need 0 < aug_scale_low <= aug_scale_high")
        return self


class RunSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    config: AdaptConfig


class ExperimentPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: Optional[TaskSpec] = None
    task_path: Optional[str] = None
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    runs: List[RunSpec] = Field(default_factory=list)
    out_dir: str = "outputs"
    seed: int = 42

    @model_validator(mode="after")
    def _check(self) -> "ExperimentPlan":
        names = [r.name for r in self.runs]
        if len(names) != len(set(names)):
            raise ConfigError(f"run names must be unique, got {names}")
        if self.task is None and self.task_path is None:
            raise ConfigError("plan needs either a task spec or a task file")
        return self


class ExperimentConfig(BaseModel):
    """Mirror of the YAML experiment file; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    task: TaskSpec = Field(default_factory=TaskSpec)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    runs: List[Dict[str, Any]] = Field(default_factory=list)

    def run_config(self, **overrides: Any) -> AdaptConfig:
        """`adapt` defaults with per-run overrides applied."""
        merged = {**self.adapt.model_dump(), **overrides}
        try:
            return AdaptConfig.model_validate(merged)
        except ValidationError as e:
            raise ConfigError(describe_validation_error(e)) from e

    def run_specs(self) -> List[RunSpec]:
        specs = []
        for entry in self.runs:
            entry = dict(entry)
            name = entry.pop("name", None)
            if not name:
                raise ConfigError(f"every run needs a name: {entry}")
            specs.append(RunSpec(name=str(name), config=self.run_config(**entry)))
        return specs


def describe_validation_error(e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(p) for p in err["loc"])
    return f"{loc}: {err['msg']}"
