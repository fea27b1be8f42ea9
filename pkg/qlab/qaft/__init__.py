"""
Quantization-aware fine-tuning (QAFT).

The global next-token NLL of the quantized network is minimized directly:
the forward pass uses Q(W) on every quantized layer, the backward pass
treats Q as the identity (straight-through estimator) and AdamW updates
the raw weights W of the quantized layers only. Quantizer scales stay
frozen at their calibrated values.

Each learning rate of the grid restarts from the pretrained weights;
the snapshot with the lowest validation NLL over every learning rate and
epoch is kept. Epoch 0 of the trace is the RTN model.
"""

import logging
import math
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from qlab.autograd import backward, ste_gradient
from qlab.base import (
    ConfigurationError,
    LayerName,
    NumericFault,
    TrainingFault,
)
from qlab.lm import Parameters, TransformerLM, evaluate_nll
from qlab.qaft.optim import (
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    linear_decay,
)
from qlab.quantizer import CalibratedQuantizer, apply_quantizers
from qlab.utils import rng_for

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (1e-6, 1e-5, 1e-4, 1e-3)


@dataclass(frozen=True)
class TrainConfig:
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    epochs: int = 8
    batch_size: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    final_lr_ratio: float = 0.1
    clip_grad_norm: float | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(
            self, "lr_grid", tuple(float(lr) for lr in self.lr_grid)
        )
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr_grid or min(self.lr_grid) <= 0:
            raise ConfigurationError(
                f"learning rates must be positive, got {self.lr_grid}",
                module="qaft",
                operation="qaft_train",
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError(
                "epochs and batch_size must be >= 1",
                module="qaft",
                operation="qaft_train",
            )


@dataclass(frozen=True)
class TraceRow:
    lr: float
    epoch: int
    train_nll: float
    val_nll: float
    test_nll: float | None = None

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "epoch": self.epoch,
            "train_nll": self.train_nll,
            "val_nll": self.val_nll,
            "test_nll": self.test_nll,
        }


@dataclass
class LrRun:
    """The outcome of one learning rate of the grid."""

    lr: float
    trace: list[TraceRow] = field(default_factory=list)
    best_val_nll: float = math.inf
    best_epoch: int = 0
    best_weights: dict[str, np.ndarray] | None = field(
        default=None, repr=False
    )
    failed: bool = False

    def summary(self) -> dict:
        return {
            "lr": self.lr,
            "best_val_nll": self.best_val_nll,
            "best_epoch": self.best_epoch,
            "failed": self.failed,
        }


@dataclass
class QaftResult:
    """
    Raw fine-tuned weights W_QAFT and the search record.

    ``params`` holds W_QAFT; use :meth:`quantized` for the deployed
    Q(W_QAFT).
    """

    params: Parameters
    quantizers: dict[LayerName, CalibratedQuantizer]
    best_lr: float
    best_epoch: int
    best_val_nll: float
    runs: list[LrRun]

    @property
    def trace(self) -> list[TraceRow]:
        return [row for run in self.runs for row in run.trace]

    def quantized(self) -> Parameters:
        return apply_quantizers(self.params, self.quantizers)


@dataclass(frozen=True)
class QaftData:
    """Blocks of the three splits; ``test`` is optional."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray | None = None
    eval_batch_size: int = 32


def _evaluate(
    params: Parameters,
    quantizers: Mapping[LayerName, CalibratedQuantizer],
    data: QaftData,
) -> tuple[float, float, float | None]:
    def nll(blocks):
        return evaluate_nll(
            params, blocks, quantizers, batch_size=data.eval_batch_size
        )

    test = nll(data.test) if data.test is not None else None
    return nll(data.train), nll(data.val), test


def _train_one_lr(
    lr: float,
    params: Parameters,
    quantizers: Mapping[LayerName, CalibratedQuantizer],
    data: QaftData,
    config: TrainConfig,
    seed: int,
    label: str,
    epoch0: TraceRow,
) -> LrRun:
    model = TransformerLM(params.config)
    names = [f"{layer}.weight" for layer in params.quantized_layers]
    weights = {name: params[name] for name in names}
    state = OptimizerState.zeros(weights)
    n_train = len(data.train)
    per_epoch = math.ceil(n_train / config.batch_size)
    total = config.epochs * per_epoch
    rng = rng_for(seed, "qaft", label, lr)

    run = LrRun(lr=lr, trace=[TraceRow(lr, 0, *_row_values(epoch0))])
    run.best_val_nll, run.best_epoch = epoch0.val_nll, 0
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n_train)
            for start in range(0, n_train, config.batch_size):
                batch = data.train[np.sort(order[start : start + config.batch_size])]
                current = params.replace(weights)
                loss = model.loss(current, batch, quantizers, trainable=names)
                grads = backward(loss)
                if config.clip_grad_norm is not None:
                    grads, _ = clip_grad_norm(grads, config.clip_grad_norm)
                weights, state = adamw_step(
                    weights,
                    grads,
                    state,
                    linear_decay(lr, step, total, config.final_lr_ratio),
                    betas=config.betas,
                    eps=config.eps,
                    weight_decay=config.weight_decay,
                )
                step += 1
            train_nll, val_nll, test_nll = _evaluate(
                params.replace(weights), quantizers, data
            )
            run.trace.append(TraceRow(lr, epoch, train_nll, val_nll, test_nll))
            log.info(
                "%s lr=%g epoch %d: train %.4f val %.4f",
                label,
                lr,
                epoch,
                train_nll,
                val_nll,
            )
            if val_nll < run.best_val_nll:
                run.best_val_nll, run.best_epoch = val_nll, epoch
                run.best_weights = dict(weights)
    except (NumericFault, TrainingFault) as e:
        log.warning("%s lr=%g failed at step %d: %s", label, lr, step, e)
        run.failed = True
    return run


def _row_values(row: TraceRow) -> tuple[float, float, float | None]:
    return row.train_nll, row.val_nll, row.test_nll


def qaft_train(
    params: Parameters,
    quantizers: Mapping[LayerName, CalibratedQuantizer],
    data: QaftData,
    config: TrainConfig | None = None,
    seed: int = 0,
    label: str = "",
) -> QaftResult:
    """
    Run the learning-rate grid and return the best validation snapshot.

    ``params`` are the pretrained weights W; ``label`` (usually the format
    name) separates the shuffling streams of different runs.
    """
    config = config or TrainConfig()
    quantizers = dict(quantizers)
    train_nll, val_nll, test_nll = _evaluate(params, quantizers, data)
    epoch0 = TraceRow(0.0, 0, train_nll, val_nll, test_nll)
    log.info(
        "%s epoch 0 (RTN): train %.4f val %.4f", label, train_nll, val_nll
    )

    def run(lr: float) -> LrRun:
        return _train_one_lr(
            lr, params, quantizers, data, config, seed, label, epoch0
        )

    if config.workers > 1 and len(config.lr_grid) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(run, config.lr_grid))
    else:
        runs = [run(lr) for lr in config.lr_grid]

    if all(r.failed for r in runs):
        raise TrainingFault(
            f"every learning rate of {config.lr_grid} diverged",
            module="qaft",
            operation="qaft_train",
        )

    best_run, best_epoch, best_val = runs[0], 0, val_nll
    for r in runs:
        for row in r.trace:
            if row.val_nll < best_val:
                best_run, best_epoch, best_val = r, row.epoch, row.val_nll
    if best_epoch == 0:
        best_params = params
    else:
        assert best_run.best_weights is not None
        best_params = params.replace(best_run.best_weights)
    log.info(
        "%s best: lr=%g epoch %d val NLL %.4f",
        label,
        best_run.lr,
        best_epoch,
        best_val,
    )
    return QaftResult(
        params=best_params,
        quantizers=quantizers,
        best_lr=best_run.lr,
        best_epoch=best_epoch,
        best_val_nll=best_val,
        runs=runs,
    )


__all__ = [
    "DEFAULT_LR_GRID",
    "LrRun",
    "QaftData",
    "QaftResult",
    "TraceRow",
    "TrainConfig",
    "adamw_step",
    "clip_grad_norm",
    "linear_decay",
    "qaft_train",
    "ste_gradient",
]
