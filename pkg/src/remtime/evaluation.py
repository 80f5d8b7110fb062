"""Analyses of prediction sets: retention curves, heatmaps, triage, comparisons."""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy
import pandas

from remtime.calibration import CalibrationSeries
from remtime.models import HeatmapCell, RetentionCurve, TriageReport, UncertaintyHeatmap
from remtime.utils import ContractError, RemtimeError, ceil_count

logger = logging.getLogger(__name__)

DEFAULT_SHARES = [1.0, 0.75, 0.5, 0.25, 0.1, 0.05]
DEFAULT_DAY_EDGES = [0.0, 5.0, 10.0, 20.0, 50.0]
DEFAULT_PREFIX_CAP = 10
MIN_RETENTION_SAMPLES = 20


def retention_curve(
    targets: Sequence[float],
    means: Sequence[float],
    total_var: Sequence[float],
    shares: Sequence[float] = DEFAULT_SHARES,
) -> RetentionCurve:
    """MAE of the most certain predictions per retained share.

    Predictions are ranked by ascending total variance; ties keep their input
    order. Each share keeps the first ceil(share * N) predictions.

    Raises:
        ContractError: Fewer than 20 predictions, missing variances or a
            share outside (0, 1].
    """
    targets, means, total_var = (
        numpy.asarray(a, dtype=float) for a in (targets, means, total_var)
    )
    n = len(targets)
    if n < MIN_RETENTION_SAMPLES:
        raise ContractError(f"Retention curves need at least 20 predictions, got {n}.")
    if numpy.isnan(total_var).any() or len(total_var) != n:
        raise ContractError("Every prediction needs a total variance.")
    shares = sorted(shares, reverse=True)
    if any(not 0 < s <= 1 for s in shares):
        raise ContractError(f"Shares must lie in (0, 1], got {shares}.")

    order = numpy.argsort(total_var, kind="stable")
    errors = numpy.abs(targets - means)[order]
    counts = [ceil_count(s, n) for s in shares]
    return RetentionCurve(
        shares=shares,
        mae=[float(errors[:c].mean()) for c in counts],
        counts=counts,
    )


def retention_frame(curve: RetentionCurve) -> pandas.DataFrame:
    """Plot-ready table of a retention curve."""
    return pandas.DataFrame(
        {"share": curve.shares, "count": curve.counts, "mae": curve.mae}
    )


def _day_labels(edges: Sequence[float]) -> List[str]:
    labels = [f"{int(lo)}-{int(hi) - 1}" for lo, hi in zip(edges[:-1], edges[1:])]
    return labels + [f">={int(edges[-1])}"]


def uncertainty_heatmap(
    prefix_lengths: Sequence[int],
    targets: Sequence[float],
    total_std: Sequence[float],
    prefix_cap: int = DEFAULT_PREFIX_CAP,
    day_edges: Sequence[float] = DEFAULT_DAY_EDGES,
) -> UncertaintyHeatmap:
    """Mean total standard deviation by prefix length and realized remaining days.

    Prefix lengths above `prefix_cap` are pooled into the cap bin. Day bins
    start at each edge and cover whole days up to the next edge; the last
    bin is open.
    """
    prefix_lengths = numpy.asarray(prefix_lengths, dtype=int)
    pooled = int((prefix_lengths > prefix_cap).sum())
    prefix_lengths = numpy.minimum(prefix_lengths, prefix_cap)
    labels = _day_labels(day_edges)
    days = numpy.floor(numpy.asarray(targets, dtype=float))
    day_index = numpy.clip(numpy.digitize(days, day_edges) - 1, 0, len(labels) - 1)

    frame = pandas.DataFrame(
        {
            "prefix_length": prefix_lengths,
            "day_bin": day_index,
            "uncertainty": numpy.asarray(total_std, dtype=float),
        }
    )
    grouped = frame.groupby(["prefix_length", "day_bin"])["uncertainty"].agg(
        ["mean", "size"]
    )
    if pooled:
        logger.warning(
            f"{pooled} predictions with prefixes longer than {prefix_cap} are pooled."
        )

    cells = []
    for p in range(1, prefix_cap + 1):
        for d, label in enumerate(labels):
            if (p, d) in grouped.index:
                row = grouped.loc[(p, d)]
                mean, count = float(row["mean"]), int(row["size"])
            else:
                mean, count = math.nan, 0
            cells.append(
                HeatmapCell(
                    prefix_length=p, day_bin=label, mean_uncertainty=mean, frequency=count
                )
            )
    return UncertaintyHeatmap(
        prefix_bins=list(range(1, prefix_cap + 1)), day_bins=labels, cells=cells
    )


def heatmap_frame(heatmap: UncertaintyHeatmap) -> pandas.DataFrame:
    """Plot-ready table of a heatmap, one row per cell."""
    return pandas.DataFrame([c.dict() for c in heatmap.cells])


def threshold_for_share(total_std: Sequence[float], share: float) -> float:
    """Smallest threshold that keeps `share` of the predictions automated."""
    if not 0 < share <= 1:
        raise ContractError(f"share must lie in (0, 1], got {share}.")
    values = numpy.sort(numpy.asarray(total_std, dtype=float))
    if len(values) == 0:
        raise ContractError("No predictions to derive a threshold from.")
    return float(values[ceil_count(share, len(values)) - 1])


def triage(
    targets: Sequence[float],
    means: Sequence[float],
    total_std: Sequence[float],
    threshold: float,
) -> TriageReport:
    """Route predictions with total std at most `threshold` to automation."""
    errors = numpy.abs(numpy.asarray(targets, dtype=float) - numpy.asarray(means, dtype=float))
    automated = numpy.asarray(total_std, dtype=float) <= threshold

    def track_mae(mask: numpy.ndarray) -> Optional[float]:
        return float(errors[mask].mean()) if mask.any() else None

    return TriageReport(
        threshold=threshold,
        automated_count=int(automated.sum()),
        automated_mae=track_mae(automated),
        human_count=int((~automated).sum()),
        human_mae=track_mae(~automated),
    )


def _prediction_key(frame: pandas.DataFrame) -> pandas.DataFrame:
    return pandas.DataFrame(
        {
            "case_id": frame["case_id"].astype(str).to_numpy(),
            "prefix_length": frame["prefix_length"].astype(int).to_numpy(),
            "target": frame["target"].astype(float).to_numpy(),
        }
    )


def compare_models(
    predictions: Dict[str, Sequence[pandas.DataFrame]],
    baseline: Optional[str] = "baseline",
) -> pandas.DataFrame:
    """MAE per variant averaged over runs, optionally relative to a baseline.

    Args:
        predictions: Prediction tables (`case_id`, `prefix_length`, `target`,
            `mean`) per variant, one per run.
        baseline: Variant whose MAE becomes 1.0 in the `normalized` column.

    Raises:
        ContractError: A run was evaluated on a different test set.

    Returns:
        Columns variant, runs, mae, mae_std and normalized.
    """
    reference = None
    rows = []
    for variant, runs in predictions.items():
        if not runs:
            raise ContractError(f"Variant '{variant}' has no runs.")
        run_mae = []
        for i, frame in enumerate(runs):
            key = _prediction_key(frame)
            if reference is None:
                reference = key
            elif not key.equals(reference):
                raise ContractError(
                    f"Run {i} of variant '{variant}' was evaluated on a different test set."
                )
            run_mae.append(float((key["target"] - frame["mean"].to_numpy()).abs().mean()))
        rows.append(
            {
                "variant": variant,
                "runs": len(run_mae),
                "mae": float(numpy.mean(run_mae)),
                "mae_std": float(numpy.std(run_mae)),
            }
        )

    table = pandas.DataFrame(rows, columns=["variant", "runs", "mae", "mae_std"])
    table["normalized"] = numpy.nan
    if baseline is not None and baseline in predictions:
        base = table.loc[table["variant"] == baseline, "mae"].iloc[0]
        table["normalized"] = table["mae"] / base
    return table


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise RemtimeError("Plots need matplotlib, install the 'plot' extra.")
    return plt


def plot_retention(curve: RetentionCurve, path: Union[str, Path]):
    """Write an SVG of MAE against retained share."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([100 * s for s in curve.shares], curve.mae, marker="o")
    ax.invert_xaxis()
    ax.set_xlabel("retained predictions (%)")
    ax.set_ylabel("MAE (days)")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_heatmap(heatmap: UncertaintyHeatmap, path: Union[str, Path]):
    """Write an SVG heatmap of mean uncertainty."""
    plt = _pyplot()
    grid = numpy.full((len(heatmap.day_bins), len(heatmap.prefix_bins)), numpy.nan)
    for cell in heatmap.cells:
        grid[heatmap.day_bins.index(cell.day_bin), cell.prefix_length - 1] = (
            cell.mean_uncertainty
        )
    fig, ax = plt.subplots(figsize=(6, 3.5))
    image = ax.imshow(grid, aspect="auto", origin="lower")
    ax.set_xticks(range(len(heatmap.prefix_bins)), heatmap.prefix_bins)
    ax.set_yticks(range(len(heatmap.day_bins)), heatmap.day_bins)
    ax.set_xlabel("prefix length")
    ax.set_ylabel("remaining days")
    fig.colorbar(image, ax=ax, label="mean total std (days)")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_calibration(series: CalibrationSeries, path: Union[str, Path]):
    """Write an SVG of critical values and coverage over the stream."""
    plt = _pyplot()
    frame = series.to_frame()
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(6, 5))
    for level, rows in frame.groupby("level"):
        top.plot(rows["as_of"], rows["z_star"], label=f"{level:.0%}")
        line = bottom.plot(rows["as_of"], rows["coverage"])[0]
        bottom.axhline(level, linestyle=":", color=line.get_color())
    top.set_ylabel("z*")
    top.legend(fontsize="small")
    bottom.set_ylabel("coverage")
    bottom.set_xlabel("test sample")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
