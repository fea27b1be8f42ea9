"""
Capture of the inputs seen by every quantized linear layer.

Two propagation modes:

- ``full-precision``: inputs come from the unquantized network, so all
  taps are captured in one pass and do not depend on the format;
- ``sequential-quantized``: the tap of a layer is captured when it is
  first requested, with every earlier layer already quantized. Earlier
  layers use the weights handed to :meth:`LayerTaps.commit`, or RTN when
  nothing was committed.
"""

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

from qlab.base import ContractViolation, LayerName
from qlab.lm import Parameters, TransformerLM
from qlab.quantizer import CalibratedQuantizer, fake_quantize

log = logging.getLogger(__name__)

FULL_PRECISION = "full-precision"
SEQUENTIAL_QUANTIZED = "sequential-quantized"
TAP_MODES = (FULL_PRECISION, SEQUENTIAL_QUANTIZED)


@dataclass(frozen=True)
class LayerTap:
    """Inputs X of one layer, one column per (example, position)."""

    layer: LayerName
    X: np.ndarray = field(repr=False)

    @property
    def d_in(self) -> int:
        return self.X.shape[0]

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]


class _Captured(Exception):
    """Stops a forward pass once the requested layer input is recorded."""


class LayerTaps(Mapping[LayerName, LayerTap]):
    def __init__(
        self,
        params: Parameters,
        blocks: np.ndarray,
        propagate: str = SEQUENTIAL_QUANTIZED,
        quantizers: Mapping[LayerName, CalibratedQuantizer] | None = None,
        batch_size: int = 32,
    ):
        if propagate not in TAP_MODES:
            raise ContractViolation(
                f"unknown propagation mode {propagate!r}, expected {TAP_MODES}",
                module="lm",
                operation="capture_layer_taps",
            )
        blocks = np.asarray(blocks)
        if blocks.ndim != 2 or len(blocks) == 0:
            raise ContractViolation(
                "calibration blocks must be a non-empty (n, seq_len) array",
                module="lm",
                operation="capture_layer_taps",
            )
        if propagate == SEQUENTIAL_QUANTIZED and quantizers is None:
            raise ContractViolation(
                "sequential-quantized taps need the layer quantizers",
                module="lm",
                operation="capture_layer_taps",
            )
        self.params = params
        self.blocks = blocks
        self.propagate = propagate
        self.quantizers = dict(quantizers or {})
        self.batch_size = batch_size
        self.layers: tuple[LayerName, ...] = tuple(params.quantized_layers)
        self._model = TransformerLM(params.config)
        self._cache: dict[LayerName, LayerTap] = {}
        self._committed: dict[LayerName, np.ndarray] = {}

    def __iter__(self) -> Iterator[LayerName]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, layer: LayerName) -> LayerTap:
        if layer not in self.layers:
            raise KeyError(layer)
        if layer not in self._cache:
            if self.propagate == FULL_PRECISION:
                self._cache.update(self._capture_all())
            else:
                self._cache[layer] = self._capture_one(layer)
        return self._cache[layer]

    def commit(self, layer: LayerName, weight: np.ndarray) -> None:
        """
        Record the final quantized weight of ``layer``.

        In sequential mode, later taps are recomputed with it in place.
        """
        self._committed[layer] = weight
        if self.propagate == SEQUENTIAL_QUANTIZED:
            after = self.layers[self.layers.index(layer) + 1 :]
            for stale in after:
                self._cache.pop(stale, None)

    def _chunks(self) -> Iterator[np.ndarray]:
        for start in range(0, len(self.blocks), self.batch_size):
            yield self.blocks[start : start + self.batch_size]

    @staticmethod
    def _columns(pieces: list[np.ndarray]) -> np.ndarray:
        # (batch, time, d_in) -> (d_in, batch * time)
        stacked = np.concatenate([p.reshape(-1, p.shape[-1]) for p in pieces])
        return np.ascontiguousarray(stacked.T)

    def _capture_all(self) -> dict[LayerName, LayerTap]:
        pieces: dict[LayerName, list[np.ndarray]] = {k: [] for k in self.layers}
        for chunk in self._chunks():
            self._model.forward(
                self.params,
                chunk,
                record=lambda name, x: pieces[name].append(x),
            )
        log.debug("Captured %d full-precision taps", len(pieces))
        return {
            layer: LayerTap(layer, self._columns(xs))
            for layer, xs in pieces.items()
        }

    def _working_params(self, layer: LayerName) -> Parameters:
        earlier = self.layers[: self.layers.index(layer)]
        weights = self.params.quantized_weights()
        updates = {}
        for name in earlier:
            if name in self._committed:
                updates[name] = self._committed[name]
            else:
                updates[name] = fake_quantize(weights[name], self.quantizers[name])
        return self.params.with_quantized_weights(updates)

    def _capture_one(self, layer: LayerName) -> LayerTap:
        params = self._working_params(layer)
        pieces: list[np.ndarray] = []

        def record(name: LayerName, x: np.ndarray) -> None:
            if name == layer:
                pieces.append(x)
                raise _Captured

        for chunk in self._chunks():
            try:
                self._model.forward(params, chunk, record=record)
            except _Captured:
                pass
        log.debug("Captured sequential tap for %s", layer)
        return LayerTap(layer, self._columns(pieces))


def capture_layer_taps(
    params: Parameters,
    blocks: np.ndarray,
    propagate: str = SEQUENTIAL_QUANTIZED,
    quantizers: Mapping[LayerName, CalibratedQuantizer] | None = None,
    batch_size: int = 32,
) -> LayerTaps:
    """Taps of every quantized layer over the calibration ``blocks``."""
    return LayerTaps(params, blocks, propagate, quantizers, batch_size)
