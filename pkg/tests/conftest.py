from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import List, Tuple

import pytest

from remtime.models import Case, Event, SchemaSpec

T0 = datetime(2021, 3, 1, 8, 0, tzinfo=timezone.utc)

# (case id, activity, hours after T0)
TOY_EVENTS: List[Tuple[str, str, float]] = [
    ("c1", "A", 0),
    ("c1", "B", 24),
    ("c1", "C", 72),
    ("c2", "A", 12),
    ("c2", "C", 36),
    ("c3", "A", 100),
    ("c3", "B", 130),
    ("c3", "B", 140),
    ("c3", "C", 160),
    ("c4", "A", 150),
    ("c4", "C", 200),
]


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_case(case_id: str, activities: List[str], hours: List[float]) -> Case:
    return Case(
        case_id=case_id,
        events=[
            Event(case_id=case_id, activity=a, timestamp=T0 + timedelta(hours=h))
            for a, h in zip(activities, hours)
        ],
    )


@pytest.fixture
def toy_cases() -> List[Case]:
    grouped = {}
    for case_id, activity, hours in TOY_EVENTS:
        grouped.setdefault(case_id, ([], []))
        grouped[case_id][0].append(activity)
        grouped[case_id][1].append(hours)
    return [make_case(c, a, h) for c, (a, h) in grouped.items()]


@pytest.fixture
def write_csv(tmp_path: Path):
    """Write CSV text to a file in the test directory."""

    def write(text: str, name: str = "log.csv") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return write


@pytest.fixture
def toy_log(write_csv) -> Path:
    lines = ["case_id,activity,timestamp"]
    for case_id, activity, hours in TOY_EVENTS:
        ts = (T0 + timedelta(hours=hours)).strftime("%Y-%m-%dT%H:%M:%S+00:00")
        lines.append(f"{case_id},{activity},{ts}")
    return write_csv("\n".join(lines) + "\n")


@pytest.fixture
def schema() -> SchemaSpec:
    return SchemaSpec(sequence_length=4)
