"""Synthetic data with known ground truth.

`gen_regression1d` draws noisy samples of a sinusoid with an input-dependent
noise level. `gen_eventlog` simulates a small approval process whose
durations, noise and drift are all known, so predictions and uncertainty
estimates can be scored against the truth.
"""
import logging
from datetime import timedelta
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy
import pandas
from pydantic import BaseModel

from remtime.eventlog import EncodedLog, write_log
from remtime.models import Case, Event, SchemaSpec, Standardization, SynthSpec
from remtime.utils import SECONDS_PER_DAY

logger = logging.getLogger(__name__)

ACTIVITIES = ["register", "check", "review", "approve", "reject", "close"]

TRANSITIONS: Dict[str, Dict[str, float]] = {
    "register": {"check": 0.6, "review": 0.4},
    "check": {"approve": 0.7, "check": 0.3},
    "review": {"approve": 0.5, "reject": 0.5},
    "approve": {"close": 1.0},
    "reject": {"close": 1.0},
}

# Mean days between an activity and the next event
MEAN_DAYS = {"register": 1.0, "check": 2.0, "review": 4.0, "approve": 0.5, "reject": 0.2}

# Multiplier of the coefficient of variation under heteroscedastic noise
NOISE_FACTORS = {"register": 0.5, "check": 1.0, "review": 2.0, "approve": 0.5, "reject": 1.0}

CHANNEL_SCALE = {"web": 1.0, "branch": 1.5}

SYNTH_SCHEMA = SchemaSpec(categorical_features=["channel"], numeric_features=["amount"])


class RegressionSample(BaseModel):
    """Noisy samples of `sin(x)` with the true noise level per sample."""

    x: numpy.ndarray
    y: numpy.ndarray
    f: numpy.ndarray
    sigma: numpy.ndarray

    class Config:  # noqa: D106
        arbitrary_types_allowed = True


def true_function(x: numpy.ndarray) -> numpy.ndarray:
    """Noise-free regression target at `x`."""
    return numpy.sin(x)


def true_sigma(x: numpy.ndarray, spec: SynthSpec) -> numpy.ndarray:
    """Noise standard deviation at `x`."""
    if spec.noise == "none":
        return numpy.zeros_like(x)
    elif spec.noise == "homoscedastic":
        return numpy.full_like(x, spec.sigma)
    return 0.1 + 0.2 * (1.0 + numpy.sin(x))


def gen_regression1d(spec: SynthSpec) -> RegressionSample:
    """Draw `spec.n` points with x uniform on [x_low, x_high]."""
    rng = numpy.random.default_rng(spec.seed)
    x = rng.uniform(spec.x_low, spec.x_high, size=spec.n)
    f = true_function(x)
    sigma = true_sigma(x, spec)
    if spec.noise == "none":
        y = f.copy()
    else:
        y = f + sigma * rng.standard_normal(spec.n)
    return RegressionSample(x=x, y=y, f=f, sigma=sigma)


def regression_log(
    x: numpy.ndarray,
    y: numpy.ndarray,
    standardization: Optional[Standardization] = None,
) -> EncodedLog:
    """Wrap 1-D regression data as length-1 windows with one numeric slot.

    Fits the standardization of `x` unless one is given.
    """
    x = numpy.asarray(x, dtype=float).reshape(-1, 1)
    if standardization is None:
        standardization = Standardization.fit(["x"], x)
    n = x.shape[0]
    return EncodedLog(
        vocabularies={},
        standardization=standardization,
        sequence_length=1,
        windows=standardization.apply(x).reshape(n, 1, 1),
        targets=numpy.asarray(y, dtype=float),
        case_ids=numpy.arange(n).astype(str),
        prefix_lengths=numpy.ones(n, dtype=numpy.int64),
        case_starts=numpy.full(n, numpy.datetime64("NaT"), dtype="datetime64[s]"),
        event_timestamps=numpy.full(n, numpy.datetime64("NaT"), dtype="datetime64[s]"),
    )


def expected_remaining() -> Dict[str, float]:
    """Expected days from each activity to the end of the case, unit scale."""
    transient = [a for a in ACTIVITIES if a != "close"]
    index = {a: i for i, a in enumerate(transient)}
    matrix = numpy.eye(len(transient))
    durations = numpy.array([MEAN_DAYS[a] for a in transient])
    for source, targets in TRANSITIONS.items():
        for target, prob in targets.items():
            if target in index:
                matrix[index[source], index[target]] -= prob
    solution = numpy.linalg.solve(matrix, durations)
    remaining = {a: float(solution[index[a]]) for a in transient}
    remaining["close"] = 0.0
    return remaining


class GeneratedLog(BaseModel):
    """Simulated cases plus per-prefix ground truth.

    `truth` has one row per prefix with the realized remaining days, the
    expectation given the full activity path (`expected_remaining`), the
    expectation given only the last activity (`state_remaining`) and the
    standard deviation of the remaining days given the path.
    """

    cases: List[Case]
    truth: pandas.DataFrame

    class Config:  # noqa: D106
        arbitrary_types_allowed = True

    def save(self, directory: Union[str, Path], schema: SchemaSpec = SYNTH_SCHEMA):
        """Write `events.csv` and `truth.csv` into `directory`."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_log(self.cases, directory / "events.csv", schema)
        self.truth.to_csv(directory / "truth.csv", index=False)


def _duration_cv(activity: str, spec: SynthSpec) -> float:
    if spec.noise == "none":
        return 0.0
    elif spec.noise == "homoscedastic":
        return spec.sigma
    return spec.sigma * NOISE_FACTORS[activity]


def gen_eventlog(spec: SynthSpec) -> GeneratedLog:
    """Simulate `spec.n` cases of the approval process.

    Cases arrive with exponential gaps of mean `arrival_days`. Each case has
    a `channel` (branch cases are 1.5 times slower) and an uninformative
    `amount`. With drift on, every case from the middle of the log onwards
    runs `drift_factor` times slower. Durations are rounded to whole
    seconds.
    """
    rng = numpy.random.default_rng(spec.seed)
    state_remaining = expected_remaining()
    arrivals = numpy.cumsum(rng.exponential(spec.arrival_days, size=spec.n))

    cases = []
    truth_rows = []
    for i in range(spec.n):
        case_id = f"case-{i:05d}"
        channel = "web" if rng.random() < 0.5 else "branch"
        amount = float(numpy.round(rng.lognormal(6.0, 1.0), 2))
        scale = CHANNEL_SCALE[channel]
        if spec.drift and i >= spec.n / 2:
            scale *= spec.drift_factor

        path = ["register"]
        while path[-1] != "close":
            options = TRANSITIONS[path[-1]]
            path.append(str(rng.choice(list(options), p=list(options.values()))))

        means = [scale * MEAN_DAYS[a] for a in path[:-1]]
        stds = [m * _duration_cv(a, spec) for m, a in zip(means, path[:-1])]
        seconds = []
        for mean, activity in zip(means, path[:-1]):
            cv = _duration_cv(activity, spec)
            days = mean if cv == 0 else rng.gamma(1.0 / cv**2, mean * cv**2)
            seconds.append(int(round(days * SECONDS_PER_DAY)))

        start = spec.start + timedelta(seconds=int(round(arrivals[i] * SECONDS_PER_DAY)))
        offsets = numpy.concatenate([[0], numpy.cumsum(seconds)])
        events = [
            Event(
                case_id=case_id,
                activity=activity,
                timestamp=start + timedelta(seconds=int(offset)),
                extra_categorical=[("channel", channel)],
                extra_numeric=[("amount", amount)],
            )
            for activity, offset in zip(path, offsets)
        ]
        cases.append(Case(case_id=case_id, events=events))

        for k, activity in enumerate(path, start=1):
            truth_rows.append(
                {
                    "case_id": case_id,
                    "prefix_length": k,
                    "activity": activity,
                    "remaining": (offsets[-1] - offsets[k - 1]) / SECONDS_PER_DAY,
                    "expected_remaining": float(sum(means[k - 1 :])),
                    "state_remaining": scale * state_remaining[activity],
                    "remaining_std": float(numpy.sqrt(sum(s**2 for s in stds[k - 1 :]))),
                }
            )

    logger.debug(f"Generated {spec.n} cases with {len(truth_rows)} prefixes.")
    return GeneratedLog(cases=cases, truth=pandas.DataFrame(truth_rows))
