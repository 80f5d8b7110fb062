"""Point predictions and Monte-Carlo dropout predictive distributions.

`mc_predict` runs T stochastic forward passes, each with its own dropout
masks, and splits the predictive variance into the spread of the sampled
means (epistemic) and the mean predicted noise variance (aleatoric).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy
import pandas
from pydantic import BaseModel
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from remtime.eventlog import EncodedLog
from remtime.layers import Network
from remtime.models import ModelSpec, PrefixBatch, SynthSpec, TrainConfig, UncertaintyEstimate
from remtime.synthdata import (
    gen_regression1d,
    regression_log,
    true_function,
    true_sigma,
)
from remtime.training import train
from remtime.utils import DEFAULT_THREADS, ContractError, spawn_seeds, spearman

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 50

PREDICTION_COLUMNS = [
    "case_id",
    "prefix_length",
    "target",
    "mean",
    "epistemic_var",
    "aleatoric_var",
    "total_std",
    "event_timestamp",
]


class PredictiveDistribution(BaseModel):
    """Per-prefix summaries of T stochastic passes.

    `mean_draws` and `log_variance_draws` are `[T, N]` and only kept on
    request.
    """

    mean: numpy.ndarray
    epistemic_var: numpy.ndarray
    aleatoric_var: numpy.ndarray
    total_var: numpy.ndarray
    total_std: numpy.ndarray
    T: int
    single_pass: bool = False
    mean_draws: Optional[numpy.ndarray] = None
    log_variance_draws: Optional[numpy.ndarray] = None

    class Config:  # noqa: D106
        allow_mutation = False
        arbitrary_types_allowed = True

    def __len__(self):  # noqa
        return int(self.mean.shape[0])

    def estimates(self) -> List[UncertaintyEstimate]:
        """One validated estimate per prefix."""
        return [
            UncertaintyEstimate(
                mean=float(self.mean[i]),
                epistemic_var=float(self.epistemic_var[i]),
                aleatoric_var=float(self.aleatoric_var[i]),
                total_var=float(self.total_var[i]),
                total_std=float(self.total_std[i]),
                T=self.T,
                single_pass=self.single_pass,
            )
            for i in range(len(self))
        ]


def decompose(
    mean_draws: numpy.ndarray,
    log_variance_draws: Optional[numpy.ndarray] = None,
    noise_var: float = 1.0,
) -> Tuple[numpy.ndarray, numpy.ndarray, numpy.ndarray, numpy.ndarray, numpy.ndarray]:
    """Predictive mean and variance terms from `[T, N]` draws.

    The epistemic part is the biased (1/T) variance of the sampled means, the
    aleatoric part the mean of exp(log variance) over the draws, or
    `noise_var` without a variance head. Draws are shifted by their minimum
    first, so identical draws give exactly zero epistemic variance.

    Returns:
        mean, epistemic variance, aleatoric variance, total variance and
        total standard deviation.
    """
    mean_draws = numpy.asarray(mean_draws, dtype=float)
    shift = mean_draws.min(axis=0)
    centered = mean_draws - shift
    offset = centered.mean(axis=0)
    mean = shift + offset
    epistemic = ((centered - offset) ** 2).mean(axis=0)
    if log_variance_draws is None:
        aleatoric = numpy.full(mean.shape, float(noise_var))
    else:
        aleatoric = numpy.exp(log_variance_draws).mean(axis=0)
    total = epistemic + aleatoric
    return mean, epistemic, aleatoric, total, numpy.sqrt(total)


def _chunks(batch: PrefixBatch, size: int) -> List[PrefixBatch]:
    return [
        PrefixBatch(
            categorical=batch.categorical[lo : lo + size],
            numeric=batch.numeric[lo : lo + size],
            targets=batch.targets[lo : lo + size],
        )
        for lo in range(0, len(batch), size)
    ]


def predict_point(
    network: Network, batch: PrefixBatch, batch_size: int = 1024
) -> numpy.ndarray:
    """Mean predictions with dropout disabled.

    Raises:
        ContractError: The batch does not fit the network.
    """
    means = [network.forward(chunk).mean.data for chunk in _chunks(batch, batch_size)]
    return numpy.concatenate(means) if means else numpy.zeros(0)


def _sample_pass(
    network: Network,
    chunks: Sequence[PrefixBatch],
    seed: numpy.random.SeedSequence,
) -> Tuple[numpy.ndarray, Optional[numpy.ndarray]]:
    means, log_variances = [], []
    for chunk in chunks:
        # Same masks for every chunk of one pass
        rng = numpy.random.default_rng(seed)
        out = network.forward(chunk, stochastic=True, rng=rng)
        means.append(out.mean.data)
        if out.log_variance is not None:
            log_variances.append(out.log_variance.data)
    mean = numpy.concatenate(means) if means else numpy.zeros(0)
    if not network.spec.heteroscedastic:
        return mean, None
    return mean, numpy.concatenate(log_variances) if log_variances else numpy.zeros(0)


def mc_predict(
    network: Network,
    batch: PrefixBatch,
    T: int = DEFAULT_SAMPLES,
    seed: int = 0,
    threads: int = DEFAULT_THREADS,
    allow_single: bool = False,
    keep_draws: bool = False,
    batch_size: int = 1024,
    progress: bool = False,
) -> PredictiveDistribution:
    """Predictive distribution from T passes with dropout active.

    Pass t draws its masks from the t-th stream spawned from `seed`, so the
    result does not depend on `threads` or `batch_size`.

    Args:
        network: Trained network.
        batch: Encoded prefixes.
        T: Number of stochastic passes.
        seed: Seed of the mask streams.
        threads: Worker threads running passes in parallel.
        allow_single: Accept T = 1; epistemic variance is then 0 and the
            result is flagged as single pass.
        keep_draws: Keep the raw `[T, N]` draws.
        batch_size: Prefixes per forward call.
        progress: Show a progress bar over passes.

    Raises:
        ContractError: T < 2 without `allow_single`, or T < 1.
    """
    if T < 1 or (T < 2 and not allow_single):
        raise ContractError(f"mc_predict needs T >= 2 (or allow_single for T = 1), got {T}.")
    if network.spec.dropout == "none":
        logger.warning("Monte-Carlo sampling a network without dropout gives zero epistemic variance.")

    chunks = _chunks(batch, batch_size)
    seeds = spawn_seeds(seed, T)
    with logging_redirect_tqdm(), ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        passes = list(
            tqdm(
                pool.map(lambda s: _sample_pass(network, chunks, s), seeds),
                total=T,
                desc="MC passes",
                disable=not progress,
            )
        )

    mean_draws = numpy.stack([m for m, _ in passes]) if len(batch) else numpy.zeros((T, 0))
    log_variance_draws = None
    if network.spec.heteroscedastic:
        log_variance_draws = (
            numpy.stack([v for _, v in passes]) if len(batch) else numpy.zeros((T, 0))
        )

    mean, epistemic, aleatoric, total, std = decompose(
        mean_draws, log_variance_draws, network.noise_var
    )
    return PredictiveDistribution(
        mean=mean,
        epistemic_var=epistemic,
        aleatoric_var=aleatoric,
        total_var=total,
        total_std=std,
        T=T,
        single_pass=T == 1,
        mean_draws=mean_draws if keep_draws else None,
        log_variance_draws=log_variance_draws if keep_draws else None,
    )


def prediction_frame(
    log: EncodedLog,
    mean: numpy.ndarray,
    distribution: Optional[PredictiveDistribution] = None,
) -> pandas.DataFrame:
    """Prediction table in the CSV layout shared by all predictors.

    Uncertainty columns stay empty without a distribution.
    """
    frame = pandas.DataFrame(
        {
            "case_id": log.case_ids,
            "prefix_length": log.prefix_lengths,
            "target": log.targets,
            "mean": mean,
            "epistemic_var": numpy.nan,
            "aleatoric_var": numpy.nan,
            "total_std": numpy.nan,
            "event_timestamp": numpy.datetime_as_string(log.event_timestamps, unit="s"),
        },
        columns=PREDICTION_COLUMNS,
    )
    if distribution is not None:
        frame["epistemic_var"] = distribution.epistemic_var
        frame["aleatoric_var"] = distribution.aleatoric_var
        frame["total_std"] = distribution.total_std
    return frame


class ShrinkageReport(BaseModel):
    """Mean uncertainty on a fixed grid per training size."""

    sizes: List[int]
    epistemic: List[float]
    aleatoric: List[float]
    true_noise_var: float
    spearman: Optional[float] = None
    passed: Optional[bool] = None


def epistemic_shrinks_with_data(
    sizes: Sequence[int],
    synth: SynthSpec,
    model: ModelSpec,
    cfg: TrainConfig,
    seeds: Sequence[int] = (0,),
    grid_points: int = 200,
    T: int = DEFAULT_SAMPLES,
    threshold: float = -0.8,
) -> ShrinkageReport:
    """Train one model per size on 1-D data and measure uncertainty on a grid.

    Each size and seed draws a fresh training set; the last 20% of it is held
    out for early stopping. Reported values are averaged over seeds. The
    trend check needs at least 3 sizes and passes when the Spearman
    correlation between size and mean epistemic variance is at most
    `threshold`.

    Raises:
        ContractError: Sizes are not strictly increasing.
    """
    sizes = list(sizes)
    if any(b <= a for a, b in zip(sizes[:-1], sizes[1:])) or not sizes:
        raise ContractError(f"sizes must be strictly increasing, got {sizes}.")

    grid = numpy.linspace(synth.x_low, synth.x_high, grid_points)
    epistemic = numpy.zeros(len(sizes))
    aleatoric = numpy.zeros(len(sizes))
    for seed in seeds:
        for j, size in enumerate(sizes):
            sample = gen_regression1d(synth.copy(update={"n": size, "seed": seed}))
            split = int(round(0.8 * size))
            train_log = regression_log(sample.x[:split], sample.y[:split])
            val_log = regression_log(
                sample.x[split:], sample.y[split:], train_log.standardization
            )
            grid_log = regression_log(
                grid, true_function(grid), train_log.standardization
            )

            network = Network.build(
                model,
                [],
                1,
                seed=seed,
                target_mean=float(train_log.targets.mean()),
                target_var=float(train_log.targets.var()),
            )
            train(network, train_log, val_log, cfg.copy(update={"seed": seed}))
            dist = mc_predict(network, grid_log.batch(), T=T, seed=seed)
            epistemic[j] += dist.epistemic_var.mean() / len(seeds)
            aleatoric[j] += dist.aleatoric_var.mean() / len(seeds)
            logger.info(
                f"Size {size}, seed {seed}: mean epistemic variance "
                + f"{dist.epistemic_var.mean():.3e}"
            )

    report = ShrinkageReport(
        sizes=sizes,
        epistemic=epistemic.tolist(),
        aleatoric=aleatoric.tolist(),
        true_noise_var=float(numpy.mean(true_sigma(grid, synth) ** 2)),
    )
    if len(sizes) >= 2:
        report.spearman = spearman(sizes, epistemic)
    if len(sizes) >= 3:
        report.passed = report.spearman <= threshold
    return report
