"""
Per-tensor symmetric integer fake quantization.

A format with B bits encodes the levels -(2**(B-1) - 1) ... 2**(B-1) - 1;
the value -2**(B-1) is never produced, so the level set is symmetric and
INT2 is effectively ternary. A :class:`CalibratedQuantizer` pairs a format
with the positive scale `a` minimizing the squared quantization error of
one weight tensor, and maps `w` to `a * clip(round(w / a))`.

Rounding is half away from zero.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from qlab.base import (
    DTYPE,
    SUPPORTED_BITS,
    ConfigurationError,
    ContractViolation,
    DegenerateInputError,
    LayerName,
    NumericFault,
)

if TYPE_CHECKING:
    from qlab.lm import Parameters

log = logging.getLogger(__name__)

N_SCALE_CANDIDATES = 512


@dataclass(frozen=True)
class QuantFormat:
    bits: int

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigurationError(
                f"Unsupported bit width {self.bits}, expected one of {SUPPORTED_BITS}",
                module="quantizer",
                operation="quant_levels",
            )

    @classmethod
    def parse(cls, name: "str | QuantFormat") -> "QuantFormat":
        """Parse a format name such as ``int3``."""
        if isinstance(name, QuantFormat):
            return name
        text = str(name).strip().lower()
        if not text.startswith("int") or not text[3:].isdigit():
            raise ConfigurationError(
                f"Invalid format name {name!r}, expected e.g. 'int4'",
                module="quantizer",
                operation="parse",
            )
        return cls(int(text[3:]))

    @property
    def name(self) -> str:
        return f"int{self.bits}"

    @property
    def qmax(self) -> int:
        """The largest representable level."""
        return 2 ** (self.bits - 1) - 1

    def __str__(self) -> str:
        return self.name


def quant_levels(fmt: QuantFormat) -> range:
    """The integer levels representable by ``fmt``."""
    return range(-fmt.qmax, fmt.qmax + 1)


@dataclass(frozen=True)
class CalibratedQuantizer:
    format: QuantFormat
    scale: float
    layer: LayerName | None = None

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ContractViolation(
                f"Quantizer scale must be positive and finite, got {self.scale}",
                module="quantizer",
                operation="fake_quantize",
            )

    def __call__(self, w: np.ndarray) -> np.ndarray:
        return fake_quantize(w, self)

    def levels(self, w: np.ndarray) -> np.ndarray:
        """The integer level of every element of ``w``."""
        return _levels(np.asarray(w), self.scale, self.format.qmax)


def _levels(w: np.ndarray, scale: float, qmax: int) -> np.ndarray:
    ratio = w.astype(np.float64) / scale
    level = np.where(
        ratio >= 0, np.floor(ratio + 0.5), -np.floor(-ratio + 0.5)
    )
    return np.clip(level, -qmax, qmax)


def fake_quantize(w: np.ndarray, q: CalibratedQuantizer) -> np.ndarray:
    """
    Round ``w`` onto the grid of ``q`` and return it as floats.

    The output keeps the dtype and shape of ``w``. Applying it twice gives
    the same bits as applying it once.
    """
    w = np.asarray(w)
    if not np.isfinite(w).all():
        raise NumericFault(
            "cannot quantize non-finite weights",
            module="quantizer",
            operation="fake_quantize",
        )
    dtype = np.dtype(w.dtype if np.issubdtype(w.dtype, np.floating) else DTYPE)
    level = _levels(w, q.scale, q.format.qmax).astype(dtype)
    # + 0.0 turns -0.0 into 0.0
    return dtype.type(q.scale) * level + dtype.type(0.0)


def candidate_scales(
    w: np.ndarray, fmt: QuantFormat, n: int = N_SCALE_CANDIDATES
) -> np.ndarray:
    """
    The calibration grid: a_i = (i / n) * max|w| / qmax for i = 1 ... n.

    The last candidate maps the top level exactly onto max|w|.
    """
    peak = float(np.abs(np.asarray(w, dtype=np.float64)).max())
    steps = np.arange(1, n + 1, dtype=np.float64) / n
    return (steps * peak / fmt.qmax).astype(DTYPE)


def quantization_error(w: np.ndarray, scale: float, fmt: QuantFormat) -> float:
    """Total squared error of quantizing ``w`` with ``scale``."""
    q = CalibratedQuantizer(fmt, float(scale))
    diff = fake_quantize(w, q).astype(np.float64) - np.asarray(
        w, dtype=np.float64
    )
    return float(np.dot(diff.ravel(), diff.ravel()))


def calibrate_scale(
    w: np.ndarray, fmt: QuantFormat, layer: LayerName | None = None
) -> CalibratedQuantizer:
    """
    Pick the grid scale minimizing the squared quantization error of ``w``.

    Ties go to the smaller scale.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ContractViolation(
            "cannot calibrate an empty tensor",
            module="quantizer",
            operation="calibrate_scale",
        )
    if not np.isfinite(w).all():
        raise NumericFault(
            "cannot calibrate non-finite weights",
            module="quantizer",
            operation="calibrate_scale",
        )
    if not np.any(w):
        raise DegenerateInputError(
            f"all-zero tensor{f' {layer}' if layer else ''}: scale undefined",
            module="quantizer",
            operation="calibrate_scale",
        )
    candidates = candidate_scales(w, fmt)
    errors = np.array([quantization_error(w, a, fmt) for a in candidates])
    best = int(np.argmin(errors))
    log.debug(
        "Calibrated %s at %s: scale=%g error=%g",
        layer or "tensor",
        fmt,
        candidates[best],
        errors[best],
    )
    return CalibratedQuantizer(fmt, float(candidates[best]), layer)


type Quantizers = dict[LayerName, CalibratedQuantizer]


def calibrate_model(params: "Parameters", fmt: QuantFormat) -> Quantizers:
    """One calibrated quantizer per quantized layer of ``params``."""
    fmt = QuantFormat.parse(fmt)
    quantizers = {
        layer: calibrate_scale(w, fmt, layer)
        for layer, w in params.quantized_weights().items()
    }
    log.info("Calibrated %d quantizers at %s", len(quantizers), fmt)
    return quantizers


def apply_quantizers(
    params: "Parameters", quantizers: Mapping[LayerName, CalibratedQuantizer]
) -> "Parameters":
    """Replace the weights of every quantized layer by their fake-quantized value."""
    weights = params.quantized_weights()
    return params.with_quantized_weights(
        {layer: fake_quantize(weights[layer], q) for layer, q in quantizers.items()}
    )


def quantize_model_rtn(
    params: "Parameters",
    fmt: QuantFormat,
    quantizers: Mapping[LayerName, CalibratedQuantizer] | None = None,
) -> "Parameters":
    """
    Round-to-nearest: W_RTN = Q(W) on every transformer-stack linear weight.

    Embeddings, the prediction head, layernorms and biases are untouched.
    Calibration runs inline unless ``quantizers`` are supplied.
    """
    if quantizers is None:
        quantizers = calibrate_model(params, fmt)
    return apply_quantizers(params, quantizers)


__all__ = [
    "CalibratedQuantizer",
    "QuantFormat",
    "Quantizers",
    "apply_quantizers",
    "calibrate_model",
    "calibrate_scale",
    "candidate_scales",
    "fake_quantize",
    "quant_levels",
    "quantization_error",
    "quantize_model_rtn",
]
