"""
AdamW and the linear learning-rate schedule.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from qlab.base import ContractViolation, TrainingFault

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """First and second moments per parameter, and the step counter."""

    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(
            exp_avg={k: np.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: np.zeros_like(v) for k, v in params.items()},
        )


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """
    One bias-corrected AdamW update of the parameters listed in ``grads``.

    Parameters without a gradient are returned unchanged. Arrays are never
    modified in place: updated parameters are new arrays.
    """
    beta1, beta2 = betas
    state.step += 1
    bias_correction1 = 1 - beta1**state.step
    bias_correction2 = 1 - beta2**state.step
    step_size = lr / bias_correction1

    updated = dict(params)
    for name, grad in grads.items():
        p = params[name]
        if grad.shape != p.shape:
            raise ContractViolation(
                f"{name}: gradient {grad.shape} for parameter {p.shape}",
                module="qaft",
                operation="adamw_step",
            )
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        exp_avg = beta1 * state.exp_avg[name] + (1 - beta1) * grad
        exp_avg_sq = beta2 * state.exp_avg_sq[name] + (1 - beta2) * grad * grad
        state.exp_avg[name] = exp_avg.astype(p.dtype)
        state.exp_avg_sq[name] = exp_avg_sq.astype(p.dtype)

        value = p * (1 - lr * weight_decay) if weight_decay else p
        denom = np.sqrt(exp_avg_sq) / math.sqrt(bias_correction2) + eps
        new = (value - step_size * exp_avg / denom).astype(p.dtype)
        if not np.isfinite(new).all():
            raise TrainingFault(
                f"non-finite update of {name} at step {state.step}",
                module="qaft",
                operation="adamw_step",
            )
        updated[name] = new
    return updated, state


def linear_decay(
    lr0: float, step: int, total_steps: int, final_ratio: float = 0.1
) -> float:
    """
    Decay linearly from ``lr0`` at step 0 to ``final_ratio * lr0`` at the end.

    Examples:
        linear_decay(1.0, 50, 100)  # 0.55
    """
    if not 0 <= step <= total_steps:
        raise ContractViolation(
            f"step {step} outside [0, {total_steps}]",
            module="qaft",
            operation="linear_decay",
        )
    if total_steps == 0:
        return lr0
    return lr0 * (1 - (1 - final_ratio) * step / total_steps)


def clip_grad_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale ``grads`` so that their global l2 norm is at most ``max_norm``."""
    norm = math.sqrt(
        math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
    )
    if norm <= max_norm or norm == 0:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, norm
