"""
Layer-wise quantization minimizing ||Q(W') X - W X||^2 (GPTQ).

For every quantized layer the inputs X captured by
:mod:`qlab.lm.taps` define the quadratic form H = 2/n X X^T. Columns of W
are quantized left to right and the rounding error of each column is
spread over the columns still to be quantized through the upper Cholesky
factor of H^-1. A dampening factor, a multiple of the mean diagonal of H,
keeps H invertible; it is searched per layer and the candidate with the
lowest layer MSE wins, round-to-nearest included.
"""

import logging
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from qlab.base import (
    CholeskyFailure,
    ConfigurationError,
    ContractViolation,
    DegenerateInputError,
    LayerName,
)
from qlab.lm import Parameters
from qlab.lm.taps import FULL_PRECISION, LayerTap, LayerTaps
from qlab.quantizer import CalibratedQuantizer, fake_quantize

log = logging.getLogger(__name__)

DEFAULT_DAMP_FACTORS = (1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4)


@dataclass
class HessianState:
    """Running 2/n X X^T of one layer, in binary64."""

    layer: LayerName
    H: np.ndarray = field(repr=False)
    n_columns: int = 0

    @classmethod
    def empty(cls, layer: LayerName, d_in: int) -> "HessianState":
        return cls(layer, np.zeros((d_in, d_in), dtype=np.float64))

    def add_batch(self, X: np.ndarray) -> "HessianState":
        """Fold the columns of ``X`` (d_in, m) into the running average."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != self.H.shape[0]:
            raise ContractViolation(
                f"{self.layer}: expected ({self.H.shape[0]}, m) inputs,"
                f" got {X.shape}",
                module="gptq",
                operation="accumulate_hessian",
            )
        m = X.shape[1]
        if m == 0:
            return self
        self.H *= self.n_columns / (self.n_columns + m)
        self.n_columns += m
        X = np.sqrt(2 / self.n_columns) * X
        self.H += X @ X.T
        return self


def accumulate_hessian(tap: LayerTap) -> HessianState:
    if tap.n_columns == 0:
        raise DegenerateInputError(
            f"{tap.layer}: no captured columns",
            module="gptq",
            operation="accumulate_hessian",
        )
    return HessianState.empty(tap.layer, tap.d_in).add_batch(tap.X)


def damp(h: HessianState, factor: float) -> HessianState:
    """H + factor * mean(diag H) * I, as a new state."""
    if not factor > 0:
        raise ContractViolation(
            f"damp factor must be positive, got {factor}",
            module="gptq",
            operation="damp",
        )
    mean_diag = float(np.mean(np.diag(h.H)))
    if mean_diag <= 0:
        raise DegenerateInputError(
            f"{h.layer}: mean Hessian diagonal is {mean_diag}",
            module="gptq",
            operation="damp",
        )
    damped = h.H + factor * mean_diag * np.eye(h.H.shape[0])
    return HessianState(h.layer, damped, h.n_columns)


@dataclass(frozen=True)
class DampSearchSpace:
    factors: tuple[float, ...] = DEFAULT_DAMP_FACTORS

    def __post_init__(self):
        factors = tuple(float(f) for f in self.factors)
        object.__setattr__(self, "factors", factors)
        if not factors:
            raise ConfigurationError(
                "the damp grid is empty",
                module="gptq",
                operation="gptq_quantize_model",
            )
        if min(factors) <= 0 or any(a >= b for a, b in zip(factors, factors[1:])):
            raise ConfigurationError(
                f"damp factors must be positive and strictly increasing: {factors}",
                module="gptq",
                operation="gptq_quantize_model",
            )


def inverse_cholesky(h: HessianState) -> np.ndarray:
    """Upper Cholesky factor U of H^-1, so that H^-1 = U^T U."""
    try:
        lower = np.linalg.cholesky(h.H)
        lower_inv = np.linalg.inv(lower)
        h_inv = lower_inv.T @ lower_inv
        upper = np.linalg.cholesky(h_inv).T
    except np.linalg.LinAlgError as e:
        raise CholeskyFailure(
            f"{h.layer}: Hessian is not positive definite ({e})",
            module="gptq",
            operation="gptq_quantize_layer",
        ) from e
    if not np.isfinite(upper).all():
        raise CholeskyFailure(
            f"{h.layer}: non-finite inverse Cholesky factor",
            module="gptq",
            operation="gptq_quantize_layer",
        )
    return upper


def gptq_quantize_layer(
    W: np.ndarray, h: HessianState, q: CalibratedQuantizer
) -> np.ndarray:
    """
    Quantize the columns of ``W`` (d_out, d_in) left to right.

    The output lies on the grid of ``q`` and has the dtype of ``W``.
    """
    W = np.asarray(W)
    d_in = W.shape[1]
    if h.H.shape != (d_in, d_in):
        raise ContractViolation(
            f"weight {W.shape} does not match Hessian {h.H.shape}",
            module="gptq",
            operation="gptq_quantize_layer",
        )
    U = inverse_cholesky(h)
    work = W.astype(np.float64)
    Q = np.empty_like(W)
    for j in range(d_in):
        column = fake_quantize(work[:, j].astype(W.dtype), q)
        Q[:, j] = column
        err = (work[:, j] - column) / U[j, j]
        work[:, j + 1 :] -= np.outer(err, U[j, j + 1 :])
    return Q


def layer_mse(W_hat: np.ndarray, W: np.ndarray, tap: LayerTap) -> float:
    """Mean over the tap columns of ||(W_hat - W) x||^2."""
    W_hat, W = np.asarray(W_hat), np.asarray(W)
    if W_hat.shape != W.shape or W.shape[1] != tap.d_in:
        raise ContractViolation(
            f"shapes {W_hat.shape}, {W.shape} and tap d_in={tap.d_in} differ",
            module="gptq",
            operation="layer_mse",
        )
    diff = (W_hat.astype(np.float64) - W.astype(np.float64)) @ tap.X.astype(
        np.float64
    )
    return float(np.sum(diff * diff) / tap.n_columns)


@dataclass(frozen=True)
class DampReport:
    """The damp search outcome of one layer."""

    layer: LayerName
    damp_factor: float | None
    mse_rtn: float
    mse_gptq: float
    candidate: str
    failed_factors: int = 0

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "damp_factor": self.damp_factor,
            "mse_rtn": self.mse_rtn,
            "mse_gptq": self.mse_gptq,
            "candidate": self.candidate,
            "failed_factors": self.failed_factors,
        }


def search_layer(
    W: np.ndarray,
    tap: LayerTap,
    q: CalibratedQuantizer,
    space: DampSearchSpace,
) -> tuple[np.ndarray, DampReport]:
    """Try every damp factor and RTN; keep the lowest layer MSE."""
    rtn = fake_quantize(W, q)
    mse_rtn = layer_mse(rtn, W, tap)
    best, best_mse, best_factor = rtn, mse_rtn, None
    failed = 0
    h = accumulate_hessian(tap)
    for factor in space.factors:
        try:
            candidate = gptq_quantize_layer(W, damp(h, factor), q)
        except (CholeskyFailure, DegenerateInputError) as e:
            log.debug("%s: damp %g failed: %s", tap.layer, factor, e)
            failed += 1
            continue
        mse = layer_mse(candidate, W, tap)
        log.debug("%s: damp %g mse %.6g", tap.layer, factor, mse)
        if mse < best_mse:
            best, best_mse, best_factor = candidate, mse, factor

    if failed == len(space.factors):
        label = "rtn-fallback"
        log.warning(
            "%s: every damp factor failed, falling back to RTN", tap.layer
        )
    else:
        label = "rtn" if best_factor is None else "gptq"
    report = DampReport(
        layer=tap.layer,
        damp_factor=best_factor,
        mse_rtn=mse_rtn,
        mse_gptq=best_mse,
        candidate=label,
        failed_factors=failed,
    )
    log.info(
        "%s: %s damp=%s mse %.6g (rtn %.6g)",
        tap.layer,
        label,
        best_factor,
        best_mse,
        mse_rtn,
    )
    return best, report


@dataclass
class GptqResult:
    params: Parameters
    report: list[DampReport]


def gptq_quantize_model(
    params: Parameters,
    taps: LayerTaps,
    quantizers: Mapping[LayerName, CalibratedQuantizer],
    space: DampSearchSpace | None = None,
    workers: int = 1,
) -> GptqResult:
    """
    Quantize every layer of ``params`` with its own damp search.

    With full-precision taps layers are independent and may run on
    ``workers`` threads; sequential taps are processed in layer order and
    each chosen weight is committed before the next tap is captured.
    """
    space = space or DampSearchSpace()
    missing = [layer for layer in taps.layers if layer not in quantizers]
    if missing:
        raise ContractViolation(
            f"no quantizer for layers {missing}",
            module="gptq",
            operation="gptq_quantize_model",
        )
    weights = params.quantized_weights()

    def run(layer: LayerName) -> tuple[np.ndarray, DampReport]:
        return search_layer(weights[layer], taps[layer], quantizers[layer], space)

    if taps.propagate == FULL_PRECISION and workers > 1:
        taps.get(taps.layers[0])  # one capture pass before fanning out
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, taps.layers))
    else:
        outcomes = []
        for layer in taps.layers:
            chosen, report = run(layer)
            taps.commit(layer, chosen)
            outcomes.append((chosen, report))

    quantized = {
        layer: chosen for layer, (chosen, _) in zip(taps.layers, outcomes)
    }
    return GptqResult(
        params=params.with_quantized_weights(quantized),
        report=[report for _, report in outcomes],
    )


__all__ = [
    "DEFAULT_DAMP_FACTORS",
    "DampReport",
    "DampSearchSpace",
    "GptqResult",
    "HessianState",
    "accumulate_hessian",
    "damp",
    "gptq_quantize_layer",
    "gptq_quantize_model",
    "inverse_cholesky",
    "layer_mse",
    "search_layer",
]
