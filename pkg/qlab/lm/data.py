"""
Plain-text corpus ingestion.

Any file is read as bytes, so the vocabulary is the 256 byte values plus
a padding id. The token stream is packed into contiguous blocks of
``seq_len`` tokens (the tail that does not fill a block is dropped) and
the blocks are split, in order, into train / validation / test.
"""

import logging
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np

from qlab.base import ConfigurationError, IngestionError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    n_calib: int = 128
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(float(s) for s in self.splits))
        if self.n_calib < 1:
            raise ConfigurationError(
                f"n_calib must be >= 1, got {self.n_calib}",
                module="lm",
                operation="ingest_corpus",
            )
        if len(self.splits) != 3 or min(self.splits) <= 0:
            raise ConfigurationError(
                f"splits must be three positive fractions, got {self.splits}",
                module="lm",
                operation="ingest_corpus",
            )
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"splits must sum to 1, got {sum(self.splits)}",
                module="lm",
                operation="ingest_corpus",
            )


@dataclass(frozen=True)
class TokenDataset:
    """
    Token blocks of one corpus.

    ``train`` holds the first ``n_calib`` blocks of the training region:
    the examples used by GPTQ and QAFT. ``pretrain`` holds the whole
    training region.
    """

    source: str
    digest: str
    n_bytes: int
    seq_len: int
    pretrain: np.ndarray = field(repr=False)
    val: np.ndarray = field(repr=False)
    test: np.ndarray = field(repr=False)
    n_calib: int = 128

    @property
    def train(self) -> np.ndarray:
        return self.pretrain[: self.n_calib]

    @property
    def n_blocks(self) -> int:
        return len(self.pretrain) + len(self.val) + len(self.test)

    def summary(self) -> dict:
        return {
            "source": self.source,
            "sha256": self.digest,
            "bytes": self.n_bytes,
            "seq_len": self.seq_len,
            "blocks": {
                "total": self.n_blocks,
                "pretrain": len(self.pretrain),
                "train": len(self.train),
                "val": len(self.val),
                "test": len(self.test),
            },
        }


def split_counts(
    n_blocks: int, splits: tuple[float, float, float]
) -> tuple[int, int, int]:
    n_train = int(np.floor(n_blocks * splits[0]))
    n_val = int(np.floor(n_blocks * splits[1]))
    return n_train, n_val, n_blocks - n_train - n_val


def ingest_corpus(
    path: Path | str, seq_len: int, config: DataConfig | None = None
) -> TokenDataset:
    """Read ``path`` and pack it into train / validation / test blocks."""
    config = config or DataConfig()
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError(
            f"cannot read corpus {path}: {e}",
            module="lm",
            operation="ingest_corpus",
        ) from e
    n_blocks = len(raw) // seq_len
    if n_blocks < 1:
        raise IngestionError(
            f"corpus {path} has {len(raw)} bytes,"
            f" shorter than one block of {seq_len}",
            module="lm",
            operation="ingest_corpus",
        )
    tokens = np.frombuffer(raw[: n_blocks * seq_len], dtype=np.uint8)
    blocks = tokens.astype(np.int64).reshape(n_blocks, seq_len)

    n_train, n_val, n_test = split_counts(n_blocks, config.splits)
    if min(n_train, n_val, n_test) < 1:
        raise IngestionError(
            f"{n_blocks} blocks cannot fill every split"
            f" (train={n_train}, val={n_val}, test={n_test})",
            module="lm",
            operation="ingest_corpus",
        )
    if n_train < config.n_calib:
        raise IngestionError(
            f"training split has {n_train} blocks, n_calib={config.n_calib}",
            module="lm",
            operation="ingest_corpus",
        )
    dataset = TokenDataset(
        source=str(path),
        digest=sha256(raw).hexdigest(),
        n_bytes=len(raw),
        seq_len=seq_len,
        pretrain=blocks[:n_train],
        val=blocks[n_train : n_train + n_val],
        test=blocks[n_train + n_val :],
        n_calib=config.n_calib,
    )
    log.info(
        "Ingested %s: %d bytes, %d blocks (train=%d val=%d test=%d)",
        path.name,
        len(raw),
        n_blocks,
        n_train,
        n_val,
        n_test,
    )
    return dataset


def ingest_test_split(
    path: Path | str, seq_len: int, config: DataConfig | None = None
) -> np.ndarray:
    """
    The test blocks of an extra evaluation corpus.

    No calibration examples are needed, so n_calib is not enforced.
    """
    config = config or DataConfig()
    relaxed = DataConfig(n_calib=1, splits=config.splits)
    return ingest_corpus(path, seq_len, relaxed).test
