"""Event log parsing, temporal splitting and prefix encoding.

An event log is read into `Case` objects, split chronologically into a
training and a test part without leaking test-period information, and every
prefix of every case is encoded into a fixed-length window with its
remaining time (in fractional days) as the regression target.
"""
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy
import pandas
from pydantic import BaseModel

from remtime.models import (
    Case,
    Event,
    PrefixBatch,
    PrefixRecord,
    SchemaSpec,
    Standardization,
    Vocabulary,
)
from remtime.utils import SECONDS_PER_DAY, ContractError, RemtimeError, ceil_count

logger = logging.getLogger(__name__)

ENCODING_VERSION = 1


class SchemaError(RemtimeError, ValueError):
    """Error thrown when a column named in the schema is missing from the log."""


class RowError(RemtimeError, ValueError):
    """Error thrown when a single row of the log cannot be parsed."""

    def __init__(self, message: str, line: int):
        super().__init__(message)
        self.line = line


class EmptyLogError(RemtimeError, ValueError):
    """Error thrown when the log contains no events."""


class SplitError(RemtimeError, ValueError):
    """Error thrown when a split would leave one side without cases."""


class EncodingError(RemtimeError, ValueError):
    """Error thrown when data cannot be encoded with a given encoding."""


def _to_datetime64(value: datetime) -> numpy.datetime64:
    return numpy.datetime64(value.astimezone(timezone.utc).replace(tzinfo=None), "s")


def _to_datetime(value: numpy.datetime64) -> datetime:
    return pandas.Timestamp(value).tz_localize("UTC").to_pydatetime()


def parse_log(path: Union[str, Path], schema: SchemaSpec) -> List[Case]:
    """Read a CSV event log into cases.

    Events are grouped by case id and sorted by timestamp, with the file order
    breaking ties. Cases are returned in order of their first event.

    Args:
        path: Path to a UTF-8 CSV file with a header row.
        schema: Column mapping of the log.

    Raises:
        EmptyLogError: The file has no data rows.
        SchemaError: A column named in `schema` is missing.
        RowError: A timestamp, activity or numeric value cannot be parsed.

    Returns:
        A list of cases.
    """
    path = Path(path)
    try:
        df = pandas.read_csv(
            path,
            sep=schema.delimiter,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8",
        )
    except pandas.errors.EmptyDataError:
        raise EmptyLogError(f"{path} is empty.")

    if len(df) == 0:
        raise EmptyLogError(f"{path} has a header but no events.")

    required = [
        schema.case_id_column,
        schema.activity_column,
        schema.timestamp_column,
        *schema.categorical_features,
        *schema.numeric_features,
    ]
    for column in required:
        if column not in df.columns:
            raise SchemaError(f"Missing column '{column}' in {path}.")

    # Header is line 1
    lines = numpy.arange(len(df)) + 2

    raw_ts = df[schema.timestamp_column]
    timestamps = pandas.to_datetime(
        raw_ts,
        format=schema.timestamp_format or "ISO8601",
        errors="coerce",
        utc=True,
    )
    bad = timestamps.isna().to_numpy()
    if bad.any():
        index = int(numpy.argmax(bad))
        raise RowError(
            f"Unparseable timestamp {raw_ts.iloc[index]!r} at line {lines[index]}.",
            line=int(lines[index]),
        )

    empty_activity = (df[schema.activity_column] == "").to_numpy()
    if empty_activity.any():
        index = int(numpy.argmax(empty_activity))
        raise RowError(f"Empty activity at line {lines[index]}.", line=int(lines[index]))

    numeric: Dict[str, numpy.ndarray] = {}
    for name in schema.numeric_features:
        raw = df[name].replace("", numpy.nan)
        values = pandas.to_numeric(raw, errors="coerce")
        bad = (values.isna() & raw.notna()).to_numpy()
        if bad.any():
            index = int(numpy.argmax(bad))
            raise RowError(
                f"Unparseable value {raw.iloc[index]!r} for '{name}' "
                + f"at line {lines[index]}.",
                line=int(lines[index]),
            )
        numeric[name] = values.to_numpy(dtype=float)

    frame = pandas.DataFrame(
        {
            "case": df[schema.case_id_column].to_numpy(),
            "ts": timestamps.dt.floor("s"),
            "line": lines,
        }
    )
    order = frame.sort_values(["ts", "line"], kind="mergesort").index.to_numpy()

    grouped: Dict[str, List[Event]] = {}
    activities = df[schema.activity_column].to_numpy()
    categorical = {name: df[name].to_numpy() for name in schema.categorical_features}
    ts_values = frame["ts"]
    for i in order:
        case_id = frame["case"].iat[i]
        event = Event(
            case_id=case_id,
            activity=activities[i],
            timestamp=ts_values.iat[i].to_pydatetime(),
            extra_categorical=[(n, categorical[n][i]) for n in categorical],
            extra_numeric=[(n, float(numeric[n][i])) for n in numeric],
        )
        grouped.setdefault(case_id, []).append(event)

    cases = [Case(case_id=key, events=events) for key, events in grouped.items()]
    logger.debug(f"Parsed {len(df)} events into {len(cases)} cases from {path}.")

    return cases


def write_log(cases: Sequence[Case], path: Union[str, Path], schema: SchemaSpec):
    """Write cases as a CSV event log readable by `parse_log`."""
    rows = []
    for case in cases:
        for event in case.events:
            if schema.timestamp_format:
                ts = event.timestamp.strftime(schema.timestamp_format)
            else:
                ts = event.timestamp.strftime("%Y-%m-%dT%H:%M:%S+00:00")
            row = {
                schema.case_id_column: case.case_id,
                schema.activity_column: event.activity,
                schema.timestamp_column: ts,
            }
            row.update(dict(event.extra_categorical))
            row.update({k: repr(v) for k, v in event.extra_numeric})
            rows.append(row)

    columns = [
        schema.case_id_column,
        schema.activity_column,
        schema.timestamp_column,
        *schema.categorical_features,
        *schema.numeric_features,
    ]
    pandas.DataFrame(rows, columns=columns).to_csv(
        path, sep=schema.delimiter, index=False
    )


def temporal_split(
    cases: Sequence[Case], test_fraction: float
) -> Tuple[List[Case], List[Case]]:
    """Split cases chronologically by their start.

    The last starting `test_fraction` of the cases form the test set. Any
    remaining case that ends at or after the start of the earliest test case
    is deleted, so no training target depends on the test period.

    Args:
        cases: The cases of a log.
        test_fraction: Share of cases, by start order, withheld for testing.

    Raises:
        ContractError: Fraction outside (0, 1) or fewer than 2 cases.
        SplitError: No training case survives the deletion rule.

    Returns:
        The training cases and the test cases, both ordered by start.
    """
    if not 0 < test_fraction < 1:
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}.")
    if len(cases) < 2:
        raise ContractError("At least 2 cases are needed for a split.")

    ranked = sorted(cases, key=lambda c: c.start)
    n_test = ceil_count(test_fraction, len(ranked))
    if n_test >= len(ranked):
        raise SplitError("The test fraction leaves no training cases.")

    test = ranked[-n_test:]
    cutoff = test[0].start
    candidates = ranked[:-n_test]
    train = [c for c in candidates if c.end < cutoff]
    logger.debug(
        f"Split {len(ranked)} cases: {len(test)} test, {len(train)} train, "
        + f"{len(candidates) - len(train)} deleted for overlapping the test period."
    )

    if len(train) == 0:
        raise SplitError("No training case ends before the first test case starts.")

    return train, test


def validation_split(
    cases: Sequence[Case], fraction: float = 0.2
) -> Tuple[List[Case], List[Case]]:
    """Hold out the chronologically last starting `fraction` of training cases."""
    if not 0 < fraction < 1:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}.")
    ranked = sorted(cases, key=lambda c: c.start)
    n_val = ceil_count(fraction, len(ranked))
    if n_val >= len(ranked) or n_val == 0:
        raise SplitError(f"Cannot hold out {fraction} of {len(ranked)} cases.")
    return ranked[:-n_val], ranked[-n_val:]


def chronological_subset(cases: Sequence[Case], share: float) -> List[Case]:
    """Keep the most recently starting `share` of the cases."""
    if not 0 < share <= 1:
        raise ContractError(f"share must lie in (0, 1], got {share}.")
    ranked = sorted(cases, key=lambda c: c.start)
    return ranked[len(ranked) - ceil_count(share, len(ranked)) :]


def assert_leakage_free(train: Sequence[Case], test: Sequence[Case]):
    """Check that every training case ends before the first test case starts.

    Raises:
        SplitError: A training case overlaps the test period.
    """
    cutoff = min(c.start for c in test)
    for case in train:
        if case.end >= cutoff:
            raise SplitError(
                f"Training case {case.case_id} ends at {case.end}, "
                + f"after the test period starts at {cutoff}."
            )


class EncodingManifest(BaseModel):
    """Encoder state that must be reused to encode data at inference."""

    version: int = ENCODING_VERSION
    sequence_length: int
    vocabularies: Dict[str, Vocabulary]
    standardization: Standardization
    schema_spec: Optional[SchemaSpec] = None

    class Config:  # noqa: D106
        extra = "forbid"

    def save(self, path: Union[str, Path]):
        """Write the manifest as JSON."""
        with open(path, "w") as fw:
            fw.write(self.json(indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EncodingManifest":
        """Read a manifest written by `save`."""
        with open(path) as fr:
            raw = json.load(fr)
        if raw.get("version") != ENCODING_VERSION:
            raise EncodingError(
                f"Unsupported encoding version {raw.get('version')} in {path}."
            )
        return cls.parse_obj(raw)


class EncodedLog(BaseModel):
    """Encoded prefixes plus the encoder state that produced them.

    Windows are `[prefixes, sequence_length, slots]` with the categorical
    indices first and the standardized numerics after them. Windows are
    left-padded with all-zero rows.
    """

    vocabularies: Dict[str, Vocabulary]
    standardization: Standardization
    sequence_length: int
    windows: numpy.ndarray
    targets: numpy.ndarray
    case_ids: numpy.ndarray
    prefix_lengths: numpy.ndarray
    case_starts: numpy.ndarray
    event_timestamps: numpy.ndarray
    schema_spec: Optional[SchemaSpec] = None

    class Config:  # noqa: D106
        allow_mutation = False
        arbitrary_types_allowed = True

    def __len__(self):  # noqa
        return int(self.targets.shape[0])

    @property
    def n_categorical(self) -> int:
        """Number of categorical slots."""
        return len(self.vocabularies)

    @property
    def n_numeric(self) -> int:
        """Number of numeric slots."""
        return len(self.standardization.names)

    @property
    def vocab_sizes(self) -> List[int]:
        """Embedding rows per categorical slot."""
        return [v.size for v in self.vocabularies.values()]

    def decode(self, feature: str, index: int) -> Optional[str]:
        """Label behind a categorical index."""
        return self.vocabularies[feature].decode(index)

    def record(self, index: int) -> PrefixRecord:
        """The prefix at `index` as a record."""
        return PrefixRecord(
            case_id=str(self.case_ids[index]),
            prefix_length=int(self.prefix_lengths[index]),
            window=self.windows[index],
            target=float(self.targets[index]),
            case_start=_to_datetime(self.case_starts[index]),
            event_timestamp=_to_datetime(self.event_timestamps[index]),
        )

    def records(self) -> List[PrefixRecord]:
        """All prefixes as records."""
        return [self.record(i) for i in range(len(self))]

    def batch(self, indices: Optional[Sequence[int]] = None) -> PrefixBatch:
        """Model input for the selected prefixes (all by default)."""
        if indices is None:
            indices = numpy.arange(len(self))
        windows = self.windows[numpy.asarray(indices, dtype=int)]
        return PrefixBatch(
            categorical=windows[:, :, : self.n_categorical].astype(numpy.int64),
            numeric=windows[:, :, self.n_categorical :],
            targets=self.targets[numpy.asarray(indices, dtype=int)],
        )

    def subset(self, indices: Sequence[int]) -> "EncodedLog":
        """A new encoded log restricted to `indices`."""
        indices = numpy.asarray(indices, dtype=int)
        return self.copy(
            update={
                "windows": self.windows[indices],
                "targets": self.targets[indices],
                "case_ids": self.case_ids[indices],
                "prefix_lengths": self.prefix_lengths[indices],
                "case_starts": self.case_starts[indices],
                "event_timestamps": self.event_timestamps[indices],
            }
        )

    def time_order(self) -> numpy.ndarray:
        """Indices that sort the prefixes by event timestamp (stable)."""
        return numpy.argsort(self.event_timestamps, kind="stable")

    def manifest(self) -> EncodingManifest:
        """The reusable encoder state."""
        return EncodingManifest(
            sequence_length=self.sequence_length,
            vocabularies=self.vocabularies,
            standardization=self.standardization,
            schema_spec=self.schema_spec,
        )

    def save(self, path: Union[str, Path]):
        """Write the prefix arrays as a compressed npz file."""
        numpy.savez_compressed(
            path,
            windows=self.windows,
            targets=self.targets,
            case_ids=self.case_ids.astype(str),
            prefix_lengths=self.prefix_lengths,
            case_starts=self.case_starts,
            event_timestamps=self.event_timestamps,
        )

    @classmethod
    def load(
        cls, path: Union[str, Path], manifest: EncodingManifest
    ) -> "EncodedLog":
        """Read prefix arrays written by `save`."""
        with numpy.load(path) as data:
            arrays = {key: data[key] for key in data.files}
        return cls(
            vocabularies=manifest.vocabularies,
            standardization=manifest.standardization,
            sequence_length=manifest.sequence_length,
            schema_spec=manifest.schema_spec,
            **arrays,
        )


def _event_features(
    case: Case, schema: SchemaSpec
) -> Tuple[List[List[str]], numpy.ndarray]:
    """Raw categorical labels and numeric values of every event of a case."""
    labels = []
    numeric = []
    start = case.start
    previous = case.start
    for number, event in enumerate(case.events, start=1):
        extra_cat = dict(event.extra_categorical)
        extra_num = dict(event.extra_numeric)
        labels.append(
            [event.activity]
            + [extra_cat.get(name, "") for name in schema.categorical_features]
        )

        row = [extra_num.get(name, math.nan) for name in schema.numeric_features]
        ts = event.timestamp
        synthetic = {
            "event_number": float(number),
            "elapsed_since_previous": (ts - previous).total_seconds()
            / SECONDS_PER_DAY,
            "elapsed_since_start": (ts - start).total_seconds() / SECONDS_PER_DAY,
            "day_of_week": float(ts.weekday()),
            "hour_of_day": float(ts.hour),
        }
        row.extend(synthetic[name] for name in schema.synthetic_features)
        numeric.append(row)
        previous = ts

    matrix = numpy.asarray(numeric, dtype=float).reshape(
        len(case.events), len(schema.numeric_slots)
    )
    return labels, matrix


def make_prefixes(
    cases: Sequence[Case],
    schema: SchemaSpec,
    fit_vocab: bool = True,
    existing: Optional[Union[EncodedLog, EncodingManifest]] = None,
) -> EncodedLog:
    """Encode every prefix of every case.

    Prefix `k` of a case holds its first `k` events; windows keep the most
    recent `sequence_length` events and are left-padded. The target is the
    time from the `k`-th event to the end of the case, in fractional days.

    Args:
        cases: Cases to encode.
        schema: Column mapping and encoding settings.
        fit_vocab: Fit vocabularies and standardization on `cases`. Only do
            this on training data.
        existing: Encoder state to reuse when `fit_vocab` is False.

    Raises:
        EncodingError: No encoder state is available, or it does not match
            the schema.

    Returns:
        The encoded prefixes.
    """
    if not fit_vocab and existing is None:
        raise EncodingError("An existing encoding is required when fit_vocab is False.")

    cat_names = schema.categorical_slots
    num_names = schema.numeric_slots
    features = [_event_features(case, schema) for case in cases]

    if fit_vocab:
        vocabularies = {
            name: Vocabulary.fit(row[j] for labels, _ in features for row in labels)
            for j, name in enumerate(cat_names)
        }
        if features:
            numeric_all = numpy.vstack([numeric for _, numeric in features])
        else:
            numeric_all = numpy.zeros((0, len(num_names)))
        # Missing values are filled with the column mean before fitting
        fill = numpy.nan_to_num(
            numpy.nanmean(numeric_all, axis=0) if len(numeric_all) else 0.0
        )
        numeric_all = numpy.where(numpy.isnan(numeric_all), fill, numeric_all)
        standardization = Standardization.fit(num_names, numeric_all)
        if (numpy.asarray(standardization.std) == 1.0).any():
            logger.debug("Some numeric features are constant and stay unscaled.")
    else:
        vocabularies = dict(existing.vocabularies)
        standardization = existing.standardization
        if list(vocabularies) != cat_names or standardization.names != num_names:
            raise EncodingError(
                f"Encoding slots {list(vocabularies)} + {standardization.names} "
                + f"do not match the schema slots {cat_names} + {num_names}."
            )

    length = schema.sequence_length
    n_cat = len(cat_names)
    n_slots = n_cat + len(num_names)
    total = sum(len(case) for case in cases)

    windows = numpy.zeros((total, length, n_slots))
    targets = numpy.zeros(total)
    case_ids = numpy.empty(total, dtype=object)
    prefix_lengths = numpy.zeros(total, dtype=numpy.int64)
    case_starts = numpy.empty(total, dtype="datetime64[s]")
    event_timestamps = numpy.empty(total, dtype="datetime64[s]")

    vocabs = list(vocabularies.values())
    index = 0
    for case, (labels, numeric) in zip(cases, features):
        cats = numpy.asarray(
            [[vocabs[j].encode(row[j]) for j in range(n_cat)] for row in labels],
            dtype=float,
        ).reshape(len(case), n_cat)
        nums = numpy.nan_to_num(standardization.apply(numeric), nan=0.0)
        rows = numpy.hstack([cats, nums])

        end = case.end
        start = _to_datetime64(case.start)
        for k in range(1, len(case) + 1):
            window_rows = rows[max(0, k - length) : k]
            windows[index, length - len(window_rows) :] = window_rows
            event_ts = case.events[k - 1].timestamp
            targets[index] = (end - event_ts).total_seconds() / SECONDS_PER_DAY
            case_ids[index] = case.case_id
            prefix_lengths[index] = k
            case_starts[index] = start
            event_timestamps[index] = _to_datetime64(event_ts)
            index += 1

    logger.debug(
        f"Encoded {total} prefixes from {len(cases)} cases; vocabulary sizes "
        + f"{[v.size for v in vocabs]}."
    )

    return EncodedLog(
        vocabularies=vocabularies,
        standardization=standardization,
        sequence_length=length,
        windows=windows,
        targets=targets,
        case_ids=case_ids.astype(str),
        prefix_lengths=prefix_lengths,
        case_starts=case_starts,
        event_timestamps=event_timestamps,
        schema_spec=schema,
    )
