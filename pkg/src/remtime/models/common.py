"""Standard models shared across remtime.

This module contains the data models used throughout remtime: parsed event
data, encoder state, model and training settings, and the result types of the
inference, calibration and evaluation steps.
"""
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy
from pydantic import BaseModel, root_validator, validator

PAD_INDEX = 0
UNKNOWN_INDEX = 1


class BaseList(BaseModel):
    """Utility class for list models."""

    def __iter__(self):  # noqa
        return iter(self.__root__)

    def __getitem__(self, item):  # noqa
        return self.__root__[item]

    def __len__(self):  # noqa
        return len(self.__root__)


class BaseDict(BaseList):
    """Utility class for dict models."""

    def items(self):
        """Return iterable of key-value pairs."""
        return self.__root__.items()

    def keys(self):
        """Return iterable of keys."""
        return self.__root__.keys()

    def values(self):
        """Return iterable of values."""
        return self.__root__.values()

    def __getitem__(self, item):  # noqa
        return self.__root__[item]


class Event(BaseModel):
    """A single row of an event log."""

    case_id: str
    activity: str
    timestamp: datetime
    extra_categorical: List[Tuple[str, str]] = []
    extra_numeric: List[Tuple[str, float]] = []

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("activity")
    def _non_empty(cls, value):
        if not value:
            raise ValueError("activity must be non-empty")
        return value

    @validator("timestamp")
    def _utc(cls, value: datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        return value.astimezone(timezone.utc).replace(microsecond=0)


class Case(BaseModel):
    """A process instance: the time-ordered events sharing a case id."""

    case_id: str
    events: List[Event]

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("events")
    def _ordered(cls, value: List[Event]):
        if len(value) == 0:
            raise ValueError("A case must have at least one event.")
        for before, after in zip(value[:-1], value[1:]):
            if after.timestamp < before.timestamp:
                raise ValueError("Case events must be sorted by timestamp.")
        return value

    def __len__(self):  # noqa
        return len(self.events)

    @property
    def start(self) -> datetime:
        """Timestamp of the first event."""
        return self.events[0].timestamp

    @property
    def end(self) -> datetime:
        """Timestamp of the last event."""
        return self.events[-1].timestamp

    @property
    def activities(self) -> List[str]:
        """Activity labels in event order."""
        return [e.activity for e in self.events]


class SchemaSpec(BaseModel):
    """Column mapping and prefix encoding settings for an event log."""

    case_id_column: str = "case_id"
    activity_column: str = "activity"
    timestamp_column: str = "timestamp"
    timestamp_format: Optional[str] = None
    delimiter: str = ","
    categorical_features: List[str] = []
    numeric_features: List[str] = []
    sequence_length: int = 32
    event_number: bool = True
    elapsed_since_previous: bool = True
    elapsed_since_start: bool = True
    day_of_week: bool = True
    hour_of_day: bool = True

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("sequence_length")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("sequence_length must be >= 1")
        return value

    @root_validator
    def _unique_names(cls, values):
        names = (
            [values.get("activity_column")]
            + list(values.get("categorical_features", []))
            + list(values.get("numeric_features", []))
        )
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"Duplicate feature names: {duplicates}")
        return values

    @property
    def synthetic_features(self) -> List[str]:
        """Enabled timestamp-derived numeric features, in slot order."""
        toggles = [
            "event_number",
            "elapsed_since_previous",
            "elapsed_since_start",
            "day_of_week",
            "hour_of_day",
        ]
        return [name for name in toggles if getattr(self, name)]

    @property
    def categorical_slots(self) -> List[str]:
        """Names of the categorical slots of a prefix window."""
        return [self.activity_column] + list(self.categorical_features)

    @property
    def numeric_slots(self) -> List[str]:
        """Names of the numeric slots of a prefix window."""
        return list(self.numeric_features) + self.synthetic_features


class Vocabulary(BaseDict):
    """Label to integer map of one categorical feature.

    Index 0 is the padding row and index 1 the bucket for labels never seen
    while fitting, so real labels start at 2.
    """

    __root__: Dict[str, int]

    @validator("__root__")
    def _reserved(cls, value: Dict[str, int]):
        if any(i in (PAD_INDEX, UNKNOWN_INDEX) for i in value.values()):
            raise ValueError("Indices 0 and 1 are reserved.")
        return value

    @classmethod
    def fit(cls, labels) -> "Vocabulary":
        """Build a vocabulary over the sorted unique labels."""
        unique = sorted({str(label) for label in labels})
        return cls.parse_obj({label: i + 2 for i, label in enumerate(unique)})

    @property
    def size(self) -> int:
        """Number of embedding rows, including the reserved ones."""
        return len(self) + 2

    def encode(self, label: str) -> int:
        """Index of `label`, or the unknown index."""
        return self.__root__.get(label, UNKNOWN_INDEX)

    def decode(self, index: int) -> Optional[str]:
        """Label stored at `index`; None for the reserved indices."""
        for label, i in self.items():
            if i == index:
                return label
        return None


class Standardization(BaseModel):
    """Per-feature mean and standard deviation fit on training data."""

    names: List[str] = []
    mean: List[float] = []
    std: List[float] = []

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @root_validator
    def _lengths(cls, values):
        n = len(values.get("names", []))
        if len(values.get("mean", [])) != n or len(values.get("std", [])) != n:
            raise ValueError("names, mean and std must have the same length")
        if any(s <= 0 for s in values.get("std", [])):
            raise ValueError("std must be positive")
        return values

    @classmethod
    def fit(cls, names: List[str], matrix: numpy.ndarray) -> "Standardization":
        """Fit on a `[rows, features]` matrix.

        Features without spread keep mean 0 and std 1, so they pass through
        unscaled.
        """
        if matrix.shape[0] == 0:
            return cls(names=names, mean=[0.0] * len(names), std=[1.0] * len(names))
        mean = matrix.mean(axis=0)
        std = matrix.std(axis=0)
        constant = std == 0
        mean[constant] = 0.0
        std[constant] = 1.0
        return cls(names=names, mean=mean.tolist(), std=std.tolist())

    def apply(self, matrix: numpy.ndarray) -> numpy.ndarray:
        """Standardize a `[rows, features]` matrix."""
        return (matrix - numpy.asarray(self.mean)) / numpy.asarray(self.std)


class PrefixRecord(BaseModel):
    """One encoded prefix of a case."""

    case_id: str
    prefix_length: int
    window: numpy.ndarray
    target: float
    case_start: datetime
    event_timestamp: datetime

    class Config:  # noqa: D106
        allow_mutation = False
        arbitrary_types_allowed = True

    @validator("prefix_length")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("prefix_length must be >= 1")
        return value

    @validator("target")
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("target must be >= 0")
        return value


class PrefixBatch(BaseModel):
    """A batch of prefix windows split into categorical and numeric slots."""

    categorical: numpy.ndarray
    numeric: numpy.ndarray
    targets: numpy.ndarray

    class Config:  # noqa: D106
        allow_mutation = False
        arbitrary_types_allowed = True

    def __len__(self):  # noqa
        return int(self.targets.shape[0])

    @property
    def sequence_length(self) -> int:
        """Window length of the batch."""
        return int(self.categorical.shape[1])


class ModelSpec(BaseModel):
    """Architecture and dropout settings of a network."""

    architecture: Literal["cnn", "lstm"] = "cnn"
    embedding_dim: Union[int, List[int]] = 8
    conv_channels: List[int] = [32, 32]
    kernel_size: int = 3
    dense_width: int = 64
    lstm_hidden: int = 64
    sequence_length: int = 32
    dropout: Literal["none", "fixed", "concrete"] = "concrete"
    dropout_p: float = 0.05
    heteroscedastic: bool = True
    temperature: float = 0.1
    length_scale: float = 1e-2
    init_p: float = 0.1

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("embedding_dim")
    def _embedding_dim(cls, value):
        dims = [value] if isinstance(value, int) else value
        if any(d <= 0 for d in dims):
            raise ValueError("embedding_dim must be positive")
        return value

    @validator("conv_channels")
    def _channels(cls, value):
        if any(c <= 0 for c in value):
            raise ValueError("conv_channels must be positive")
        return value

    @validator("kernel_size", "lstm_hidden", "sequence_length")
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @validator("dense_width")
    def _width(cls, value):
        if value < 0:
            raise ValueError("dense_width must be >= 0")
        return value

    @validator("dropout_p")
    def _p(cls, value):
        if not 0 <= value < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        return value

    @validator("init_p")
    def _init_p(cls, value):
        if not 0 < value < 1:
            raise ValueError("init_p must lie in (0, 1)")
        return value

    @validator("temperature", "length_scale")
    def _strictly_positive(cls, value):
        if value <= 0:
            raise ValueError("must be > 0")
        return value


class TrainConfig(BaseModel):
    """Mini-batch training settings.

    Setting `patience` to None disables early stopping.
    """

    batch_size: int = 256
    max_epochs: int = 100
    learning_rate: float = 1e-3
    patience: Optional[int] = 10
    seed: int = 0
    checkpoint_path: Optional[Path] = None
    progress: bool = False

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("batch_size", "max_epochs")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @validator("patience")
    def _patience(cls, value):
        if value is not None and value < 0:
            raise ValueError("patience must be >= 0")
        return value


class LossBreakdown(BaseModel):
    """Terms of the training objective."""

    data_term: float
    weight_reg_term: float = 0.0
    dropout_entropy_term: float = 0.0
    total: float = 0.0

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @root_validator(pre=True)
    def _total(cls, values):
        total = (
            values["data_term"]
            + values.get("weight_reg_term", 0.0)
            + values.get("dropout_entropy_term", 0.0)
        )
        if "total" in values and values["total"] != total:
            raise ValueError("total must equal the sum of its terms")
        values["total"] = total
        return values


class EpochRecord(BaseModel):
    """Training summary of one epoch."""

    epoch: int
    train: LossBreakdown
    train_mae: float
    val_mae: float
    seconds: float


class TrainReport(BaseModel):
    """Outcome of a training run."""

    epochs: List[EpochRecord]
    best_epoch: int
    best_val_mae: float
    dropout_probabilities: Dict[str, float] = {}
    stopped_early: bool = False

    @root_validator
    def _best(cls, values):
        epochs = values.get("epochs", [])
        if epochs:
            best = min(epochs, key=lambda e: e.val_mae)
            if best.val_mae != values["best_val_mae"]:
                raise ValueError("best epoch must have the minimal validation MAE")
        return values


class UncertaintyEstimate(BaseModel):
    """Predictive distribution summary of one prefix."""

    mean: float
    epistemic_var: float
    aleatoric_var: float
    total_var: float
    total_std: float
    T: int
    single_pass: bool = False

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @root_validator
    def _decomposition(cls, values):
        if values["epistemic_var"] < 0 or values["aleatoric_var"] < 0:
            raise ValueError("variances must be non-negative")
        if values["total_var"] != values["epistemic_var"] + values["aleatoric_var"]:
            raise ValueError("total_var must equal epistemic_var + aleatoric_var")
        if values["total_std"] != math.sqrt(values["total_var"]):
            raise ValueError("total_std must equal sqrt(total_var)")
        return values


class CriticalValueTable(BaseModel):
    """Empirical critical values per confidence level."""

    levels: List[float]
    z_star: List[float]
    window: int
    as_of: int

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @root_validator
    def _monotone(cls, values):
        levels, z_star = values.get("levels", []), values.get("z_star", [])
        if len(levels) != len(z_star) or len(levels) == 0:
            raise ValueError("levels and z_star must be non-empty and aligned")
        if list(levels) != sorted(levels):
            raise ValueError("levels must be sorted")
        if any(z < 0 for z in z_star):
            raise ValueError("z_star must be >= 0")
        if any(b < a for a, b in zip(z_star[:-1], z_star[1:])):
            raise ValueError("z_star must be non-decreasing in the level")
        return values

    def z(self, level: float) -> float:
        """Critical value of `level`."""
        return self.z_star[self.levels.index(level)]


class IntervalPrediction(BaseModel):
    """A point estimate with one confidence interval per level."""

    mean: float
    total_std: float
    bounds: Dict[float, Tuple[float, float]]
    clamped: bool = False

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"


class RetentionCurve(BaseModel):
    """MAE of the most certain predictions per retained share."""

    shares: List[float]
    mae: List[float]
    counts: List[int]

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("shares")
    def _descending(cls, value):
        if list(value) != sorted(value, reverse=True):
            raise ValueError("shares must be sorted descending")
        return value


class HeatmapCell(BaseModel):
    """One cell of an uncertainty heatmap."""

    prefix_length: int
    day_bin: str
    mean_uncertainty: float
    frequency: int


class UncertaintyHeatmap(BaseModel):
    """Mean uncertainty by prefix length and realized remaining days."""

    prefix_bins: List[int]
    day_bins: List[str]
    cells: List[HeatmapCell]

    @property
    def total(self) -> int:
        """Number of samples in the heatmap."""
        return sum(c.frequency for c in self.cells)


class TriageReport(BaseModel):
    """Split of predictions into an automated and a human track."""

    threshold: float
    automated_count: int
    automated_mae: Optional[float]
    human_count: int
    human_mae: Optional[float]


class StateAnnotation(BaseModel):
    """Remaining-time statistics of one abstract state."""

    count: int
    mean: float
    median: float

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("count")
    def _count(cls, value):
        if value < 1:
            raise ValueError("count must be >= 1")
        return value


class SynthSpec(BaseModel):
    """Settings of a synthetic data generator.

    `sigma` is the noise standard deviation of `regression1d` data and the
    coefficient of variation of event durations of `eventlog` data.
    """

    kind: Literal["regression1d", "eventlog"] = "eventlog"
    n: int = 200
    noise: Literal["none", "homoscedastic", "heteroscedastic"] = "heteroscedastic"
    sigma: float = 0.3
    drift: bool = False
    drift_factor: float = 2.0
    seed: int = 0
    x_low: float = -4.0
    x_high: float = 4.0
    start: datetime = datetime(2020, 1, 1, tzinfo=timezone.utc)
    arrival_days: float = 0.5

    class Config:  # noqa: D106
        allow_mutation = False
        extra = "forbid"

    @validator("n")
    def _n(cls, value):
        if value < 1:
            raise ValueError("n must be >= 1")
        return value

    @root_validator
    def _sigma(cls, values):
        if values.get("noise") != "none" and values.get("sigma", 0) <= 0:
            raise ValueError("sigma must be > 0 unless noise is 'none'")
        return values
