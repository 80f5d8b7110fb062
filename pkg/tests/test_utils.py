import numpy
import pytest

from remtime.utils import (
    ceil_count,
    config_hash,
    file_checksum,
    spawn_generators,
    spearman,
)


@pytest.mark.parametrize(
    ("share", "n", "expected"),
    [(0.15, 20, 3), (0.05, 40, 2), (0.1, 25, 3), (1.0, 7, 7), (0.5, 1, 1)],
)
def test_ceil_count(share, n, expected):
    assert ceil_count(share, n) == expected


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [9, 4, 1, 0]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [5, 5, 5]) == 0.0


def test_spawn_generators_are_positional():
    first = [g.random() for g in spawn_generators(4, 3)]
    again = [g.random() for g in spawn_generators(4, 5)][:3]

    assert first == again
    assert len(set(first)) == 3


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_file_checksum(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_bytes(b"")

    assert file_checksum(path) == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    )
    assert numpy.isscalar(file_checksum(path))
