"""Models for data and data validation."""
from remtime.models.common import (  # noqa: F401
    PAD_INDEX,
    UNKNOWN_INDEX,
    BaseDict,
    BaseList,
    Case,
    CriticalValueTable,
    EpochRecord,
    Event,
    HeatmapCell,
    IntervalPrediction,
    LossBreakdown,
    ModelSpec,
    PrefixBatch,
    PrefixRecord,
    RetentionCurve,
    SchemaSpec,
    Standardization,
    StateAnnotation,
    SynthSpec,
    TrainConfig,
    TrainReport,
    TriageReport,
    UncertaintyEstimate,
    UncertaintyHeatmap,
    Vocabulary,
)
