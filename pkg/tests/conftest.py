import numpy as np
import pytest

from qlab.lm import ModelConfig, Parameters
from qlab.lm.data import DataConfig, TokenDataset, ingest_corpus
from tests.constants import CORPUS

TINY = {"seq_len": 8, "d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32}


@pytest.fixture
def tiny_config() -> ModelConfig:
    """A one-block model small enough for exhaustive gradient checks."""
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_params(tiny_config: ModelConfig) -> Parameters:
    return Parameters.init(tiny_config)


@pytest.fixture
def tiny_dataset(tiny_config: ModelConfig) -> TokenDataset:
    return ingest_corpus(CORPUS, tiny_config.seq_len, DataConfig(n_calib=16))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
