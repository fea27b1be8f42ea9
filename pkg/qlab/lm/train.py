"""
Full-precision pretraining of the base model.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from qlab.autograd import backward
from qlab.base import ConfigurationError, NumericFault, TrainingFault
from qlab.lm import ModelConfig, Parameters, TransformerLM, evaluate_nll
from qlab.lm.data import TokenDataset
from qlab.qaft.optim import (
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    linear_decay,
)
from qlab.utils import rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-3
    eval_every: int = 100
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    final_lr_ratio: float = 0.1
    clip_grad_norm: float | None = 1.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError(
                "steps, batch_size and eval_every must be >= 1",
                module="lm",
                operation="pretrain_base",
            )
        if self.lr <= 0:
            raise ConfigurationError(
                f"lr must be positive, got {self.lr}",
                module="lm",
                operation="pretrain_base",
            )


@dataclass
class PretrainResult:
    params: Parameters
    initial_train_nll: float
    best_step: int
    best_val_nll: float
    history: list[dict] = field(default_factory=list)


def pretrain_base(
    model_config: ModelConfig,
    dataset: TokenDataset,
    config: PretrainConfig | None = None,
    eval_blocks: int | None = None,
    eval_batch_size: int = 32,
) -> PretrainResult:
    """
    Train fresh parameters on the training region of ``dataset``.

    Mini-batches are sampled with a stream derived from the model seed;
    every ``eval_every`` steps the validation NLL is measured and the best
    parameters seen so far are kept.
    """
    config = config or PretrainConfig()
    model = TransformerLM(model_config)
    params = Parameters.init(model_config)
    trainable = list(params)
    rng = rng_for(model_config.seed, "pretrain")
    val = dataset.val[:eval_blocks]
    probe = dataset.train[:eval_blocks]

    def evaluate(p: Parameters) -> tuple[float, float]:
        try:
            return (
                evaluate_nll(p, probe, batch_size=eval_batch_size),
                evaluate_nll(p, val, batch_size=eval_batch_size),
            )
        except NumericFault:
            return math.inf, math.inf

    initial_train, initial_val = evaluate(params)
    log.info(
        "Pretraining %d parameters for %d steps: train NLL %.4f, val NLL %.4f",
        params.size,
        config.steps,
        initial_train,
        initial_val,
    )
    history = [
        {"step": 0, "train_nll": initial_train, "val_nll": initial_val}
    ]
    best, best_step, best_val = params, 0, initial_val
    state = OptimizerState.zeros(params)
    tensors = dict(params)

    for step in range(config.steps):
        index = rng.integers(0, len(dataset.pretrain), size=config.batch_size)
        batch = dataset.pretrain[np.sort(index)]
        lr = linear_decay(config.lr, step, config.steps, config.final_lr_ratio)
        try:
            loss = model.loss(params, batch, trainable=trainable)
            grads = backward(loss)
        except NumericFault as e:
            raise TrainingFault(
                f"pretraining diverged at step {step + 1}: {e}",
                module="lm",
                operation="pretrain_base",
            ) from e
        if config.clip_grad_norm is not None:
            grads, _ = clip_grad_norm(grads, config.clip_grad_norm)
        tensors, state = adamw_step(
            tensors,
            grads,
            state,
            lr,
            betas=config.betas,
            eps=config.eps,
            weight_decay=config.weight_decay,
        )
        params = Parameters(model_config, tensors)
        log.debug("step %d: loss %.4f lr %.2e", step + 1, loss.item(), lr)

        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            train_nll, val_nll = evaluate(params)
            history.append(
                {"step": step + 1, "train_nll": train_nll, "val_nll": val_nll}
            )
            log.info(
                "step %d: train NLL %.4f, val NLL %.4f",
                step + 1,
                train_nll,
                val_nll,
            )
            if not math.isfinite(val_nll):
                raise TrainingFault(
                    f"validation NLL is {val_nll} at step {step + 1}",
                    module="lm",
                    operation="pretrain_base",
                )
            if val_nll < best_val:
                best, best_step, best_val = params, step + 1, val_nll

    log.info("Best validation NLL %.4f at step %d", best_val, best_step)
    return PretrainResult(
        params=best,
        initial_train_nll=initial_train,
        best_step=best_step,
        best_val_nll=best_val,
        history=history,
    )
