"""Tests for AdamW, the learning-rate schedule and gradient clipping."""

import numpy as np
import pytest

from qlab.base import ContractViolation, TrainingFault
from qlab.qaft import adamw_step, clip_grad_norm, linear_decay, ste_gradient
from qlab.qaft.optim import OptimizerState


def test_first_step():
    """
    Given:
    - gradient 0.5 and lr 1e-3 at the first step
    Then:
    - the bias-corrected update is about -1e-3
    """
    params = {"w": np.array([1.0])}
    state = OptimizerState.zeros(params)
    updated, state = adamw_step(params, {"w": np.array([0.5])}, state, 1e-3)
    assert updated["w"][0] - 1.0 == pytest.approx(-1e-3, rel=1e-6)
    assert state.step == 1
    assert params["w"][0] == 1.0


def test_zero_gradient_keeps_parameters():
    params = {"w": np.array([0.3, -2.0], dtype=np.float32)}
    state = OptimizerState.zeros(params)
    for _ in range(5):
        params, state = adamw_step(
            params, {"w": np.zeros(2, dtype=np.float32)}, state, 1e-2
        )
    np.testing.assert_array_equal(params["w"], np.array([0.3, -2.0], np.float32))
    assert params["w"].dtype == np.float32


def test_only_listed_parameters_move():
    params = {"a": np.ones(2), "b": np.ones(2)}
    updated, _ = adamw_step(params, {"a": np.ones(2)}, OptimizerState(), 0.1)
    assert updated["b"] is params["b"]
    assert (updated["a"] < 1).all()


def test_weight_decay():
    params = {"w": np.array([2.0])}
    updated, _ = adamw_step(
        params, {"w": np.zeros(1)}, OptimizerState(), 0.1, weight_decay=0.5
    )
    assert updated["w"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_adamw_errors():
    params = {"w": np.ones(2, dtype=np.float32)}
    with pytest.raises(ContractViolation):
        adamw_step(params, {"w": np.ones(3)}, OptimizerState(), 0.1)
    with pytest.raises(TrainingFault):
        adamw_step(params, {"w": np.ones(2)}, OptimizerState(), 1e40)


@pytest.mark.parametrize(
    "step,expected", [(0, 1e-3), (100, 1e-4), (50, 0.55e-3), (25, 0.775e-3)]
)
def test_linear_decay(step, expected):
    assert linear_decay(1e-3, step, 100) == pytest.approx(expected, rel=1e-12)


def test_linear_decay_errors():
    with pytest.raises(ContractViolation):
        linear_decay(1e-3, 101, 100)
    with pytest.raises(ContractViolation):
        linear_decay(1e-3, -1, 100)
    assert linear_decay(1e-3, 0, 0) == 1e-3


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    unchanged, _ = clip_grad_norm(grads, 10.0)
    np.testing.assert_array_equal(unchanged["a"], grads["a"])


def test_ste_gradient_is_identity():
    upstream = np.array([0.0, -1.5, 2.0])
    np.testing.assert_array_equal(ste_gradient(upstream), upstream)
    np.testing.assert_array_equal(ste_gradient(np.zeros(3)), np.zeros(3))
