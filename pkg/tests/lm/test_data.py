"""Tests for corpus ingestion and splitting."""

import numpy as np
import pytest

from qlab.base import ConfigurationError, IngestionError
from qlab.lm.data import DataConfig, ingest_corpus, ingest_test_split, split_counts
from tests.constants import CORPUS


def test_block_count():
    """
    Given:
    - the test corpus and seq_len 8
    Then:
    - there are floor(bytes / 8) blocks before splitting
    - blocks are split 80/10/10 in file order
    """
    n_bytes = CORPUS.stat().st_size
    dataset = ingest_corpus(CORPUS, 8, DataConfig(n_calib=16))
    assert dataset.n_blocks == n_bytes // 8
    assert dataset.n_bytes == n_bytes
    n_train, n_val, n_test = split_counts(dataset.n_blocks, (0.8, 0.1, 0.1))
    assert len(dataset.pretrain) == n_train
    assert len(dataset.val) == n_val
    assert len(dataset.test) == n_test
    raw = np.frombuffer(CORPUS.read_bytes(), dtype=np.uint8)
    np.testing.assert_array_equal(dataset.pretrain[0], raw[:8])
    np.testing.assert_array_equal(dataset.val[0], raw[8 * n_train : 8 * n_train + 8])


def test_calibration_split():
    dataset = ingest_corpus(CORPUS, 8, DataConfig(n_calib=128))
    assert len(dataset.train) == 128
    np.testing.assert_array_equal(dataset.train, dataset.pretrain[:128])
    assert dataset.summary()["blocks"]["train"] == 128


def test_deterministic():
    a = ingest_corpus(CORPUS, 16, DataConfig(n_calib=4))
    b = ingest_corpus(CORPUS, 16, DataConfig(n_calib=4))
    assert a.digest == b.digest
    np.testing.assert_array_equal(a.pretrain, b.pretrain)
    assert a.pretrain.dtype == np.int64


def test_too_short(tmp_path):
    short = tmp_path / "short.txt"
    short.write_bytes(b"abc")
    with pytest.raises(IngestionError, match="shorter than one block"):
        ingest_corpus(short, 8)


def test_split_cannot_be_filled(tmp_path):
    small = tmp_path / "small.txt"
    small.write_bytes(b"x" * 8 * 5)
    with pytest.raises(IngestionError):
        ingest_corpus(small, 8, DataConfig(n_calib=1))


def test_not_enough_calibration_blocks():
    with pytest.raises(IngestionError, match="n_calib"):
        ingest_corpus(CORPUS, 8, DataConfig(n_calib=100_000))


def test_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        ingest_corpus(tmp_path / "missing.txt", 8)


def test_test_split_ignores_n_calib():
    test = ingest_test_split(CORPUS, 8, DataConfig(n_calib=100_000))
    assert len(test) == len(ingest_corpus(CORPUS, 8, DataConfig(n_calib=1)).test)


@pytest.mark.parametrize(
    "kwargs",
    [{"n_calib": 0}, {"splits": (0.5, 0.5, 0.0)}, {"splits": (0.8, 0.1, 0.2)}],
)
def test_invalid_data_config(kwargs):
    with pytest.raises(ConfigurationError):
        DataConfig(**kwargs)
