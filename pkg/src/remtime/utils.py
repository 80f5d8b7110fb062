"""Utility functions."""
import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, List, Sequence, Union

import numpy
import pandas
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)-8s - %(levelname)-8s - %(message)s"
LOG_DATEFMT = "%d-%b-%y %H:%M:%S"

# Load the environment defaults
load_dotenv()
LOG_LEVEL = os.environ.get("REMTIME_LOG_LEVEL", "INFO")
DEFAULT_THREADS = int(os.environ.get("REMTIME_THREADS", "1"))
RUNS_ROOT = Path(os.environ.get("REMTIME_RUNS_ROOT", "runs"))

SECONDS_PER_DAY = 86400.0


class RemtimeError(Exception):
    """Base class for all errors raised by remtime."""


class ContractError(RemtimeError, ValueError):
    """Error thrown when the caller violates an operation's precondition."""


def configure_logging(level: Union[str, int, None] = None) -> None:
    """Install the package log format on the root logger.

    Args:
        level: Logging level name or number. Defaults to `REMTIME_LOG_LEVEL`.
    """
    logging.basicConfig(format=LOG_FORMAT, datefmt=LOG_DATEFMT)
    logging.getLogger("remtime").setLevel(level or LOG_LEVEL)


def spawn_seeds(seed: int, n: int) -> List[numpy.random.SeedSequence]:
    """Split one seed into `n` independent seed sequences."""
    return numpy.random.SeedSequence(seed).spawn(n)


def spawn_generators(seed: int, n: int) -> List[numpy.random.Generator]:
    """Split one seed into `n` independent random streams.

    The streams only depend on `seed` and their position, so work distributed
    over threads stays reproducible.
    """
    return [numpy.random.default_rng(child) for child in spawn_seeds(seed, n)]


def ceil_count(share: float, n: int) -> int:
    """Number of items in `share` of `n`, rounded up.

    Float noise such as `0.15 * 20 = 3.0000000000000004` is removed before
    rounding up.
    """
    return int(math.ceil(round(share * n, 9)))


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    rank_a = pandas.Series(a, dtype=float).rank().to_numpy()
    rank_b = pandas.Series(b, dtype=float).rank().to_numpy()
    if rank_a.std() == 0 or rank_b.std() == 0:
        return 0.0
    return float(numpy.corrcoef(rank_a, rank_b)[0, 1])


def file_checksum(path: Path) -> str:
    """sha256 checksum of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as fr:
        for chunk in iter(lambda: fr.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(config: Any) -> str:
    """Stable sha256 of a JSON-serializable configuration."""
    payload = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()
