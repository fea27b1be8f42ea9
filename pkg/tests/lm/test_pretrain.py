"""Tests for base-model pretraining."""

import numpy as np
import pytest

from qlab.base import ConfigurationError
from qlab.lm.train import PretrainConfig, pretrain_base

FAST = PretrainConfig(steps=30, batch_size=4, lr=3e-3, eval_every=10)


@pytest.mark.slow
def test_pretraining_lowers_nll(tiny_config, tiny_dataset):
    """
    Given:
    - a fresh one-block model
    When:
    - I pretrain it for a few steps on the test corpus
    Then:
    - the best validation NLL is below the initial one
    - the history has one row per evaluation, step 0 included
    """
    result = pretrain_base(tiny_config, tiny_dataset, FAST, eval_blocks=16)
    assert [row["step"] for row in result.history] == [0, 10, 20, 30]
    assert result.best_val_nll < result.history[0]["val_nll"]
    assert result.best_val_nll == min(row["val_nll"] for row in result.history)


@pytest.mark.slow
def test_pretraining_is_deterministic(tiny_config, tiny_dataset):
    config = PretrainConfig(steps=5, batch_size=2, eval_every=5)
    a = pretrain_base(tiny_config, tiny_dataset, config, eval_blocks=4)
    b = pretrain_base(tiny_config, tiny_dataset, config, eval_blocks=4)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


@pytest.mark.parametrize("kwargs", [{"steps": 0}, {"lr": 0.0}, {"batch_size": 0}])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        PretrainConfig(**kwargs)
