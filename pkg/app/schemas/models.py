"""
Pydantic models for configurations, reports and API payloads.
"""
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class ModelKind(str, Enum):
    """Classifier architectures available to the harness."""
    SM_RNN = "sm-rnn"
    FF_NN = "ff-nn"
    RNN = "rnn"
    LSTM = "lstm"


class DatasetKind(str, Enum):
    """MNIST encodings: bitmap rows or pen strokes."""
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


class RunStatus(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"


class FinalActivation(str, Enum):
    """Last stage of an MLP block."""
    RELU = "relu"
    PRELU = "prelu"
    NONE = "none"


class IntervalMethod(str, Enum):
    """Critical value used for confidence intervals."""
    STUDENT_T = "t"
    NORMAL_Z = "z"


class SMConfig(BaseModel):
    """Dimensions and mark bounds of a stigmergic memory classifier."""
    marks: int = Field(..., ge=1, description="Mark count M")
    stimulus_dim: int = Field(..., ge=1, description="Stimulus dimension S")
    hidden_dim: int = Field(default=20, ge=1, description="Deposit/Removal hidden width H")
    class_hidden_dim: int = Field(..., ge=1, description="Classification hidden width")
    num_classes: int = Field(default=10, ge=1, description="Class count C")
    mark_lo: float = Field(default=0.0, description="Finishing level")
    mark_hi: float = Field(default=1.0, description="Saturation level")
    mark_init: float = Field(default=0.0, description="Initial mark value m(0)")

    @model_validator(mode="after")
    def check_bounds(self) -> "SMConfig":
        if not self.mark_lo <= self.mark_init <= self.mark_hi:
            raise ValueError(
                f"mark bounds must satisfy lo <= init <= hi, got "
                f"{self.mark_lo} / {self.mark_init} / {self.mark_hi}"
            )
        return self


class TrainConfig(BaseModel):
    """Optimization settings for one training run."""
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=128, ge=1)
    full_batch: bool = Field(default=False, description="One batch per length bucket")
    lr: float = Field(default=1e-3, ge=0.0)
    clip_norm: Optional[float] = Field(default=None, gt=0.0, description="Global-norm clipping threshold")
    seed: int = Field(default=0)
    eval_every: int = Field(default=10, ge=1, description="Iterations between curve snapshots")


class ExperimentConfig(BaseModel):
    """A multi-run benchmark experiment."""
    model: ModelKind = ModelKind.SM_RNN
    dataset: DatasetKind = DatasetKind.SPATIAL
    runs: int = Field(default=10, ge=1)
    train: TrainConfig = Field(default_factory=TrainConfig)
    train_size: Optional[int] = Field(default=None, ge=1, description="Training subset size (desk scale)")
    test_size: Optional[int] = Field(default=None, ge=1, description="Test subset size (desk scale)")
    synthetic: Optional[int] = Field(default=None, ge=20, description="Use a generated corpus of this size")
    interval: IntervalMethod = IntervalMethod.STUDENT_T
    workers: int = Field(default=1, ge=1)
    out: Optional[Path] = Field(default=None, description="Report JSON path")

    @model_validator(mode="after")
    def check_pairing(self) -> "ExperimentConfig":
        if self.model == ModelKind.FF_NN and self.dataset != DatasetKind.SPATIAL:
            raise ValueError("ff-nn only pairs with the spatial dataset")
        return self


class CurveRecord(BaseModel):
    """One training-curve snapshot."""
    iteration: int
    loss: float
    train_accuracy: float


class EpochMetrics(BaseModel):
    epoch: int
    mean_loss: float
    classification_rate: float
    iterations: int = 0
    curve: list[CurveRecord] = Field(default_factory=list)


class RunResult(BaseModel):
    """Outcome of a single run of an experiment."""
    run: int
    seed: int
    status: RunStatus
    test_rate: Optional[float] = None
    epochs: list[EpochMetrics] = Field(default_factory=list)
    curve: list[CurveRecord] = Field(default_factory=list)
    error: Optional[str] = None

    @field_validator("test_rate")
    @classmethod
    def check_rate(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValueError(f"classification rate {value} outside [0, 1]")
        return value


class LiteratureRow(BaseModel):
    """A published result reported alongside measured rows."""
    model: str
    complexity: int
    rate: float
    half_width: float
    source: Literal["paper"] = "paper"


class RunReport(BaseModel):
    """Aggregate report of an experiment."""
    model: ModelKind
    dataset: DatasetKind
    parameter_count: int
    published_complexity: Optional[int] = None
    topology_note: Optional[str] = None
    rates: list[float] = Field(default_factory=list, description="Test rates of completed runs")
    mean: Optional[float] = None
    half_width: Optional[float] = Field(default=None, ge=0.0)
    interval: IntervalMethod = IntervalMethod.STUDENT_T
    level: float = 0.99
    runs: list[RunResult] = Field(default_factory=list)
    failed_runs: list[int] = Field(default_factory=list)
    preprocessing: dict[str, str] = Field(default_factory=dict)
    literature: list[LiteratureRow] = Field(default_factory=list)
    config: ExperimentConfig
    wall_clock_s: float = 0.0

    @field_validator("rates")
    @classmethod
    def check_rates(cls, values: list[float]) -> list[float]:
        for value in values:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"classification rate {value} outside [0, 1]")
        return values


class ParamTerm(BaseModel):
    """One component of a parameter count, e.g. (880 + 20 + 315) · 2."""
    label: str
    parts: list[int]
    multiplier: int = 1

    @property
    def subtotal(self) -> int:
        return sum(self.parts) * self.multiplier

    def render(self) -> str:
        body = " + ".join(f"{p:,}" for p in self.parts)
        if len(self.parts) > 1:
            body = f"({body})"
        return f"{body} · {self.multiplier}" if self.multiplier != 1 else body


class ParamReport(BaseModel):
    """Itemized parameter count of a (model, dataset) pairing."""
    model: ModelKind
    dataset: DatasetKind
    terms: list[ParamTerm]
    total: int
    published_total: Optional[int] = None
    note: Optional[str] = None

    @property
    def expression(self) -> str:
        return " + ".join(t.render() for t in self.terms) + f" = {self.total:,}"


class ParameterEntry(BaseModel):
    """A named parameter tensor in serialized form."""
    name: str
    shape: list[int]
    values: list[float]


class ModelDocument(BaseModel):
    """JSON document holding a model's parameters and configuration."""
    kind: str
    config: Optional[dict] = None
    parameters: list[ParameterEntry] = Field(default_factory=list)


class ErrorResponse(BaseModel):
    """Error response model."""
    success: bool = False
    error: str = Field(..., description="Error message")
    detail: Optional[str] = Field(default=None, description="Detailed error information")


class HealthResponse(BaseModel):
    """Health check response."""
    status: str = "healthy"
    version: str = "1.0.0"
    results_dir: str = ""
