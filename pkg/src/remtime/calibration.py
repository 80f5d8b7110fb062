"""Empirical critical values and confidence intervals.

A critical value z* of a level is the level-quantile of the normalized
absolute residuals |y - mean| / total_std over a trailing window. Intervals
are mean -/+ z* * total_std with the lower bound clamped at zero days.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy
import pandas
from pydantic import BaseModel

from remtime.models import CriticalValueTable, IntervalPrediction
from remtime.utils import ContractError

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = [0.5, 0.75, 0.9, 0.95, 0.99]
DEFAULT_WINDOW = 5000
DEFAULT_STRIDE = 1000


def normalized_residuals(
    targets: numpy.ndarray, means: numpy.ndarray, total_std: numpy.ndarray
) -> numpy.ndarray:
    """|y - mean| / total_std."""
    targets, means, total_std = (
        numpy.asarray(a, dtype=float) for a in (targets, means, total_std)
    )
    if not (targets.shape == means.shape == total_std.shape):
        raise ContractError("targets, means and total_std must have the same shape.")
    if (total_std <= 0).any():
        raise ContractError("Every total_std must be > 0.")
    return numpy.abs(targets - means) / total_std


def fit_critical_values(
    targets: numpy.ndarray,
    means: numpy.ndarray,
    total_std: numpy.ndarray,
    levels: Sequence[float] = DEFAULT_LEVELS,
    as_of: int = 0,
) -> CriticalValueTable:
    """Critical value per level from one window of predictions.

    Args:
        targets: Realized remaining times.
        means: Predicted means.
        total_std: Predicted total standard deviations, all > 0.
        levels: Confidence levels in (0, 1).
        as_of: Stream position the table is valid from.

    Raises:
        ContractError: Empty window or non-positive standard deviation.
    """
    if len(targets) == 0:
        raise ContractError("Cannot fit critical values on an empty window.")
    levels = sorted(levels)
    if any(not 0 < level < 1 for level in levels):
        raise ContractError(f"Levels must lie in (0, 1), got {levels}.")
    scores = normalized_residuals(targets, means, total_std)
    z_star = numpy.quantile(scores, levels, method="linear")
    # Rounding inside the interpolation must not break monotonicity
    z_star = numpy.maximum.accumulate(numpy.maximum(z_star, 0.0))
    return CriticalValueTable(
        levels=levels, z_star=z_star.tolist(), window=len(scores), as_of=as_of
    )


def coverage(
    targets: numpy.ndarray,
    means: numpy.ndarray,
    total_std: numpy.ndarray,
    table: CriticalValueTable,
) -> Dict[float, float]:
    """Share of targets inside the interval of each level."""
    scores = normalized_residuals(targets, means, total_std)
    return {
        level: float((scores <= z).mean()) for level, z in zip(table.levels, table.z_star)
    }


def build_intervals(
    means: Sequence[float],
    total_std: Sequence[float],
    table: CriticalValueTable,
) -> List[IntervalPrediction]:
    """Interval per level around every mean; lower bounds below 0 are clamped."""
    intervals = []
    for mean, std in zip(means, total_std):
        bounds: Dict[float, Tuple[float, float]] = {}
        clamped = False
        for level, z in zip(table.levels, table.z_star):
            lower = mean - z * std
            if lower < 0:
                lower = 0.0
                clamped = True
            bounds[level] = (lower, mean + z * std)
        intervals.append(
            IntervalPrediction(
                mean=mean, total_std=std, bounds=bounds, clamped=clamped
            )
        )
    return intervals


class CalibrationSeries(BaseModel):
    """Critical value tables of a rolling calibration with their coverage."""

    tables: List[CriticalValueTable]
    coverage: List[Dict[float, float]]

    def to_frame(self) -> pandas.DataFrame:
        """One row per table and level: as_of, level, z_star, coverage."""
        rows = [
            {
                "as_of": table.as_of,
                "level": level,
                "z_star": z,
                "coverage": cover[level],
            }
            for table, cover in zip(self.tables, self.coverage)
            for level, z in zip(table.levels, table.z_star)
        ]
        return pandas.DataFrame(rows, columns=["as_of", "level", "z_star", "coverage"])

    def mean_coverage(self) -> Dict[float, float]:
        """Coverage per level averaged over all tables."""
        levels = self.tables[0].levels if self.tables else []
        return {
            level: float(numpy.mean([c[level] for c in self.coverage])) for level in levels
        }


def rolling_calibrate(
    targets: numpy.ndarray,
    means: numpy.ndarray,
    total_std: numpy.ndarray,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
    levels: Sequence[float] = DEFAULT_LEVELS,
    history: Optional[Tuple[numpy.ndarray, numpy.ndarray, numpy.ndarray]] = None,
) -> CalibrationSeries:
    """Refit critical values every `stride` samples of a time-ordered stream.

    At every position the table is fit on the preceding `window` samples and
    scored on the following `window` samples (fewer at the end of the
    stream). With `history`, the last `window` history samples are put in
    front of the stream, so the first table is fit on them and applies from
    stream position 0. Positions are reported relative to the stream.

    Args:
        targets: Realized remaining times in time order.
        means: Predicted means.
        total_std: Predicted total standard deviations.
        window: Samples per fitting and scoring window.
        stride: Samples between refits.
        levels: Confidence levels.
        history: Optional earlier (targets, means, total_std), e.g. the last
            training predictions.

    Raises:
        ContractError: Not enough samples for one refit.
    """
    if window < 1 or stride < 1:
        raise ContractError("window and stride must be >= 1.")

    offset = 0
    if history is not None:
        tail = [numpy.asarray(h, dtype=float)[-window:] for h in history]
        offset = len(tail[0])
        targets = numpy.concatenate([tail[0], targets])
        means = numpy.concatenate([tail[1], means])
        total_std = numpy.concatenate([tail[2], total_std])

    n = len(targets)
    start = max(window, offset)
    if n < start + stride:
        raise ContractError(
            f"A stream of {n - offset} samples is too short for window {window} "
            + f"and stride {stride}."
        )

    tables, covers = [], []
    for position in range(start, n - stride + 1, stride):
        past = slice(position - window, position)
        following = slice(position, min(position + window, n))
        table = fit_critical_values(
            targets[past], means[past], total_std[past], levels, as_of=position - offset
        )
        tables.append(table)
        covers.append(
            coverage(targets[following], means[following], total_std[following], table)
        )

    logger.debug(f"Fitted {len(tables)} critical value tables.")
    return CalibrationSeries(tables=tables, coverage=covers)
