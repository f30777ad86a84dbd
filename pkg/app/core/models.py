from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, computed_field, model_validator

from app.core.attention import AttentionKind

ArchName = Literal["z2cnn", "p4cnn", "a-p4cnn", "p4mcnn", "a-p4mcnn"]
GroupName = Literal["z2", "p4", "p4m"]
SyntheticMode = Literal["quarter", "uniform"]
AttentionInit = Literal["random", "identity"]


# Training
class TrainConfig(BaseModel):
    lr: float = Field(default=0.01, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    epochs: int = Field(default=10, ge=1)
    batch: int = Field(default=16, ge=1)
    seed: int = 0
    clip_percentile: float = Field(default=99.0, gt=0.0, le=100.0)
    standardize: bool = True
    freeze_attention: bool = False
    n_train: int = Field(default=2000, ge=1)
    n_valid: int = Field(default=500, ge=1)
    n_test: int = Field(default=2000, ge=1)


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    valid_error: float


# Architecture
class LayerSpec(BaseModel):
    kind: Literal["lift", "group", "relu", "max_pool", "orientation_pool", "global_pool", "dense"]
    channels: int | None = None
    kernel: int = 3
    attention: bool = False


class ArchSpec(BaseModel):
    name: str
    group: GroupName
    channels: int = Field(default=8, ge=1)
    kernel: int = 3
    layers: list[LayerSpec]
    attention_kind: AttentionKind | None = None

    @model_validator(mode="after")
    def check_layers(self) -> "ArchSpec":
        if self.kernel % 2 == 0:
            raise ValueError(f"Kernel size must be odd, got {self.kernel}")
        if any(layer.attention for layer in self.layers) and self.attention_kind is None:
            raise ValueError(f"{self.name}: attended layers need an attention_kind")
        if any(layer.attention and layer.kind not in ("lift", "group") for layer in self.layers):
            raise ValueError(f"{self.name}: attention can only follow a convolution")
        return self

    @property
    def attended_layers(self) -> int:
        return sum(layer.attention for layer in self.layers)


# Verification
class CheckReport(BaseModel):
    check: str
    trials: int
    max_dev: float
    tol: float
    negative_control: bool = False
    inconclusive: int = 0
    counterexample: dict[str, Any] | None = None

    @computed_field
    @property
    def passed(self) -> bool:
        return self.max_dev <= self.tol

    @property
    def ok(self) -> bool:
        """A negative control is ok when it fails."""
        return self.passed != self.negative_control


class SuiteReport(BaseModel):
    group: GroupName
    seed: int
    checks: list[CheckReport]

    @computed_field
    @property
    def ok(self) -> bool:
        """Negative controls are reported but do not decide the outcome."""
        return all(check.passed for check in self.checks if not check.negative_control)


class TrainingChecks(BaseModel):
    arch: ArchName
    per_epoch: list[CheckReport]
    final: CheckReport | None = None


# Artifacts
class TensorEntry(BaseModel):
    name: str
    shape: list[int]
    offset: int

    @property
    def size(self) -> int:
        size = 1
        for axis in self.shape:
            size *= axis
        return size


class TrainingRun(BaseModel):
    """What eval needs to rebuild the model and the exact splits it was trained on."""

    channels: int = Field(ge=1)
    seed: int
    attention_init: AttentionInit = "random"
    data: Path | None = None
    synthetic: SyntheticMode | None = None
    recipe: TrainConfig


class ParameterManifest(BaseModel):
    arch: ArchName
    group: GroupName
    dtype: Literal["<f8"] = "<f8"
    tensors: list[TensorEntry]
    count: int
    run: TrainingRun | None = None


class RunConfig(BaseModel):
    command: str
    settings: dict[str, Any]
    config_file: Path | None = None
    out: Path


class ComparisonRow(BaseModel):
    arch: ArchName
    seeds: list[int]
    test_errors: list[float]
    mean_error: float
    std_error: float
    parameters: int
