"""
Byte-level decoder-only transformer.

Parameters live in a :class:`Parameters` mapping whose key order is the
canonical order used by checkpoints:

    tok_emb, pos_emb,
    blocks.{i}.ln1.{gamma,beta},
    blocks.{i}.attn.{q,k,v,out}.{weight,bias},
    blocks.{i}.ln2.{gamma,beta},
    blocks.{i}.mlp.{fc1,fc2}.{weight,bias},
    ln_f.{gamma,beta}, head.{weight,bias}

Linear weights are laid out (d_out, d_in) and applied as x @ W.T + b.
The weight vector w is the concatenation of the flattened weights of the
quantized layers, block by block in QUANTIZED_LAYERS order.
"""

import logging
import math
from collections.abc import Callable, Collection, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from qlab.autograd import (
    Tensor,
    add,
    causal_attention,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    straight_through,
)
from qlab.base import (
    DTYPE,
    QUANTIZED_LAYERS,
    VOCAB_SIZE,
    ConfigurationError,
    ContractViolation,
    LayerName,
    ParameterName,
)
from qlab.quantizer import CalibratedQuantizer, QuantFormat
from qlab.utils import rng_for

log = logging.getLogger(__name__)

INIT_STD = 0.02

type Recorder = Callable[[LayerName, np.ndarray], None]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    seq_len: int = 128
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.d_model % self.n_heads:
            problems.append(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.seq_len < 2:
            problems.append(f"seq_len={self.seq_len} must be >= 2")
        if self.n_layers < 1:
            problems.append(f"n_layers={self.n_layers} must be >= 1")
        if min(self.vocab_size, self.d_model, self.d_ff, self.n_heads) < 1:
            problems.append("sizes must be positive")
        if problems:
            raise ConfigurationError(
                "; ".join(problems), module="lm", operation="ModelConfig"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def quantized_layer_names(config: ModelConfig) -> list[LayerName]:
    return [
        f"blocks.{i}.{layer}"
        for i in range(config.n_layers)
        for layer in QUANTIZED_LAYERS
    ]


def _layer_shape(config: ModelConfig, layer: str) -> tuple[int, int]:
    d, ff = config.d_model, config.d_ff
    return {"mlp.fc1": (ff, d), "mlp.fc2": (d, ff)}.get(layer, (d, d))


def parameter_shapes(config: ModelConfig) -> dict[ParameterName, tuple]:
    """Every parameter name and shape, in canonical order."""
    d = config.d_model
    shapes: dict[ParameterName, tuple] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.seq_len, d),
    }
    for i in range(config.n_layers):
        prefix = f"blocks.{i}"
        for layer in QUANTIZED_LAYERS:
            if layer == "attn.q":
                shapes[f"{prefix}.ln1.gamma"] = (d,)
                shapes[f"{prefix}.ln1.beta"] = (d,)
            if layer == "mlp.fc1":
                shapes[f"{prefix}.ln2.gamma"] = (d,)
                shapes[f"{prefix}.ln2.beta"] = (d,)
            d_out, d_in = _layer_shape(config, layer)
            shapes[f"{prefix}.{layer}.weight"] = (d_out, d_in)
            shapes[f"{prefix}.{layer}.bias"] = (d_out,)
    shapes["ln_f.gamma"] = (d,)
    shapes["ln_f.beta"] = (d,)
    shapes["head.weight"] = (config.vocab_size, d)
    shapes["head.bias"] = (config.vocab_size,)
    return shapes


class Parameters(Mapping[ParameterName, np.ndarray]):
    """
    Named parameter tensors of one model, in canonical order.

    Instances are treated as immutable: updates return a new instance
    sharing the untouched arrays.
    """

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        shapes = parameter_shapes(config)
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ContractViolation(
                f"parameter names do not match the architecture:"
                f" missing={missing} unexpected={extra}",
                module="lm",
                operation="Parameters",
            )
        self.config = config
        self._tensors: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            value = np.asarray(tensors[name])
            if value.shape != shape:
                raise ContractViolation(
                    f"{name}: expected shape {shape}, got {value.shape}",
                    module="lm",
                    operation="Parameters",
                )
            self._tensors[name] = value

    @classmethod
    def init(cls, config: ModelConfig) -> "Parameters":
        """Fresh parameters drawn from the config seed."""
        rng = rng_for(config.seed, "init")
        residual_std = INIT_STD / math.sqrt(2 * config.n_layers)
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gamma"):
                value = np.ones(shape)
            elif name.endswith((".beta", ".bias")):
                value = np.zeros(shape)
            elif name.endswith(("attn.out.weight", "mlp.fc2.weight")):
                value = rng.normal(0.0, residual_std, shape)
            else:
                value = rng.normal(0.0, INIT_STD, shape)
            tensors[name] = value.astype(DTYPE)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"Parameters({len(self)} tensors, {self.size} values)"

    @property
    def size(self) -> int:
        return sum(v.size for v in self._tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return self._tensors["tok_emb"].dtype

    @property
    def quantized_layers(self) -> list[LayerName]:
        return quantized_layer_names(self.config)

    def quantized_weights(self) -> dict[LayerName, np.ndarray]:
        return {
            layer: self._tensors[f"{layer}.weight"]
            for layer in self.quantized_layers
        }

    @property
    def n_quantized(self) -> int:
        """D, the length of the weight vector w."""
        return sum(w.size for w in self.quantized_weights().values())

    def replace(self, updates: Mapping[str, np.ndarray]) -> "Parameters":
        tensors = dict(self._tensors)
        tensors.update(updates)
        return Parameters(self.config, tensors)

    def with_quantized_weights(
        self, weights: Mapping[LayerName, np.ndarray]
    ) -> "Parameters":
        return self.replace({f"{k}.weight": v for k, v in weights.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            self.config,
            {k: v.astype(dtype) for k, v in self._tensors.items()},
        )

    def flatten(self) -> np.ndarray:
        """The weight vector w over the quantized-layer coordinates."""
        return np.concatenate(
            [w.reshape(-1) for w in self.quantized_weights().values()]
        )

    def unflatten(self, vector: np.ndarray) -> "Parameters":
        """Parameters whose quantized weights are read from ``vector``."""
        vector = np.asarray(vector)
        if vector.shape != (self.n_quantized,):
            raise ContractViolation(
                f"expected a vector of length {self.n_quantized},"
                f" got shape {vector.shape}",
                module="lm",
                operation="unflatten",
            )
        updates, offset = {}, 0
        for layer, w in self.quantized_weights().items():
            chunk = vector[offset : offset + w.size]
            updates[layer] = chunk.reshape(w.shape).astype(self.dtype)
            offset += w.size
        return self.with_quantized_weights(updates)


def next_token_targets(tokens: np.ndarray) -> np.ndarray:
    """Targets for every position; the last position has none (-1)."""
    targets = np.full(tokens.shape, -1, dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    return targets


class TransformerLM:
    """
    The network f_W over a :class:`ModelConfig`.

    The model holds no weights: every call receives the parameters, so a
    single instance evaluates any number of parameter sets concurrently.
    """

    def __init__(self, config: ModelConfig):
        self.config = config

    def forward(
        self,
        params: Parameters,
        tokens: np.ndarray,
        quantizers: Mapping[LayerName, CalibratedQuantizer] | None = None,
        trainable: Collection[str] = (),
        record: Recorder | None = None,
    ) -> Tensor:
        """
        Logits of shape (batch, time, vocab) for integer ``tokens``.

        Layers listed in ``quantizers`` use Q(W) in their matmul with a
        straight-through gradient; ``record`` receives the input of every
        quantized layer before it is applied.
        """
        tokens = np.asarray(tokens)
        cfg = self.config
        if tokens.ndim != 2 or not 1 <= tokens.shape[1] <= cfg.seq_len:
            raise ContractViolation(
                f"tokens must be (batch, time <= {cfg.seq_len}),"
                f" got {tokens.shape}",
                module="lm",
                operation="forward",
            )
        quantizers = quantizers or {}

        def leaf(name: str) -> Tensor:
            if name in trainable:
                return Tensor.parameter(params[name], name)
            return Tensor.constant(params[name])

        def dense(layer: str, x: Tensor) -> Tensor:
            if record is not None:
                record(layer, x.data)
            weight = leaf(f"{layer}.weight")
            if layer in quantizers:
                weight = straight_through(weight, quantizers[layer])
            return linear(x, weight, leaf(f"{layer}.bias"))

        time = tokens.shape[1]
        x = add(
            embedding(leaf("tok_emb"), tokens),
            embedding(leaf("pos_emb"), np.arange(time)),
        )
        for i in range(cfg.n_layers):
            p = f"blocks.{i}"
            h = layer_norm(x, leaf(f"{p}.ln1.gamma"), leaf(f"{p}.ln1.beta"))
            attn = causal_attention(
                dense(f"{p}.attn.q", h),
                dense(f"{p}.attn.k", h),
                dense(f"{p}.attn.v", h),
                cfg.n_heads,
            )
            x = add(x, dense(f"{p}.attn.out", attn))
            h = layer_norm(x, leaf(f"{p}.ln2.gamma"), leaf(f"{p}.ln2.beta"))
            h = gelu(dense(f"{p}.mlp.fc1", h))
            x = add(x, dense(f"{p}.mlp.fc2", h))
        x = layer_norm(x, leaf("ln_f.gamma"), leaf("ln_f.beta"))
        return linear(x, leaf("head.weight"), leaf("head.bias"))

    def loss(
        self,
        params: Parameters,
        tokens: np.ndarray,
        quantizers: Mapping[LayerName, CalibratedQuantizer] | None = None,
        trainable: Collection[str] = (),
    ) -> Tensor:
        """Mean next-token NLL as a graph node."""
        logits = self.forward(params, tokens, quantizers, trainable)
        return cross_entropy(logits, next_token_targets(np.asarray(tokens)))


def forward_nll(
    params: Parameters,
    quantizers: Mapping[LayerName, CalibratedQuantizer] | None,
    batch: np.ndarray,
) -> float:
    """Mean next-token NLL of ``batch`` over all predicted positions."""
    return TransformerLM(params.config).loss(params, batch, quantizers).item()


def evaluate_nll(
    params: Parameters,
    blocks: np.ndarray,
    quantizers: Mapping[LayerName, CalibratedQuantizer] | None = None,
    batch_size: int = 32,
    workers: int = 1,
) -> float:
    """
    NLL over a whole split, evaluated in chunks of ``batch_size`` blocks.

    Chunks may run on ``workers`` threads; the result does not depend on it.
    """
    blocks = np.asarray(blocks)
    if len(blocks) == 0:
        raise ContractViolation(
            "cannot evaluate an empty split",
            module="lm",
            operation="evaluate_nll",
        )
    model = TransformerLM(params.config)
    chunks = [
        blocks[start : start + batch_size]
        for start in range(0, len(blocks), batch_size)
    ]

    def chunk_total(chunk: np.ndarray) -> float:
        loss = model.loss(params, chunk, quantizers).item()
        return loss * chunk.shape[0] * (chunk.shape[1] - 1)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            totals = list(pool.map(chunk_total, chunks))
    else:
        totals = [chunk_total(c) for c in chunks]
    return math.fsum(totals) / (blocks.shape[0] * (blocks.shape[1] - 1))


def quantized_tensor_bytes(count: int, fmt: QuantFormat | None) -> int:
    """Storage of ``count`` values: ceil(count * B / 8), or 4 bytes each."""
    if fmt is None:
        return 4 * count
    return math.ceil(count * fmt.bits / 8)


def weight_size_bytes(config: ModelConfig, fmt: QuantFormat | None) -> int:
    """
    Total transformer weight size in bytes.

    Only the transformer blocks count; embeddings and the head are
    excluded. Quantized weights take B bits each, everything else 4 bytes.
    """
    quantized = {f"{layer}.weight" for layer in quantized_layer_names(config)}
    total = 0
    for name, shape in parameter_shapes(config).items():
        if not name.startswith("blocks."):
            continue
        count = math.prod(shape)
        total += quantized_tensor_bytes(count, fmt if name in quantized else None)
    return total


__all__ = [
    "ModelConfig",
    "Parameters",
    "TransformerLM",
    "evaluate_nll",
    "forward_nll",
    "next_token_targets",
    "parameter_shapes",
    "quantized_layer_names",
    "quantized_tensor_bytes",
    "weight_size_bytes",
]
