"""
Forward kernels and their vector-Jacobian products.

Shapes follow numpy broadcasting; every kernel keeps the floating dtype
of its inputs.
"""

import logging
import math
from collections.abc import Callable

import numpy as np

from qlab.autograd.graph import Tensor, node
from qlab.base import ContractViolation

log = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
GELU_COEFF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _contract(ok: bool, op: str, message: str) -> None:
    if not ok:
        raise ContractViolation(message, module="autograd", operation=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast",
            module="autograd",
            operation=op,
        ) from None


def ste_gradient(upstream: np.ndarray) -> np.ndarray:
    """Straight-through rule: the quantizer's Jacobian is the identity."""
    return upstream


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return node("add", a.data + b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return node("mul", a.data * b.data, (a, b), grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    c = a.data.dtype.type(factor)

    def grad_fn(g):
        return (g * c,)

    return node("scale", a.data * c, (a,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return node("sum", a.data.sum(dtype=a.data.dtype), (a,), grad_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    _contract(a.data.ndim >= 2, "transpose", f"needs a matrix, got {a.shape}")

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return node("transpose", np.swapaxes(a.data, -1, -2), (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` with broadcasting over batch axes."""
    _contract(
        a.data.ndim >= 2 and b.data.ndim >= 2,
        "matmul",
        f"operands must be at least 2-D, got {a.shape} and {b.shape}",
    )
    _contract(
        a.shape[-1] == b.shape[-2],
        "matmul",
        f"inner dimensions differ: {a.shape} @ {b.shape}",
    )

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return node("matmul", np.matmul(a.data, b.data), (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight laid out (d_out, d_in)."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    _contract(
        np.issubdtype(ids.dtype, np.integer),
        "embedding",
        f"ids must be integers, got {ids.dtype}",
    )
    _contract(
        ids.size == 0 or (ids.min() >= 0 and ids.max() < table.shape[0]),
        "embedding",
        f"ids out of range for a table of {table.shape[0]} rows",
    )

    def grad_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return node("embedding", table.data[ids], (table,), grad_fn)


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS
) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    width = x.shape[-1]
    _contract(
        gamma.shape == (width,) and beta.shape == (width,),
        "layernorm",
        f"affine shapes {gamma.shape}, {beta.shape} do not match width {width}",
    )
    dtype = x.data.dtype
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + dtype.type(eps))).astype(dtype)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        grad_gamma = (g * xhat).sum(axis=reduce_axes)
        grad_beta = g.sum(axis=reduce_axes)
        gxhat = g * gamma.data
        grad_x = (inv_std / width) * (
            width * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return grad_x.astype(dtype), grad_gamma, grad_beta

    return node("layernorm", out, (x, gamma, beta), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    dtype = x.data.dtype
    c = dtype.type(SQRT_2_OVER_PI)
    k = dtype.type(GELU_COEFF)
    half = dtype.type(0.5)
    u = c * (x.data + k * x.data**3)
    t = np.tanh(u)
    out = half * x.data * (1 + t)

    def grad_fn(g):
        du = c * (1 + 3 * k * x.data**2)
        local = half * (1 + t) + half * x.data * (1 - t * t) * du
        return (g * local,)

    return node("gelu", out, (x,), grad_fn)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """
    Multi-head causal softmax attention over (batch, time, d_model) inputs.

    Position t only attends to positions <= t: masked scores are -inf
    before the max-subtracted softmax, so their weights are exactly 0.
    """
    _contract(
        q.shape == k.shape == v.shape and q.data.ndim == 3,
        "attention",
        f"q, k, v must share a (B, T, d) shape: {q.shape} {k.shape} {v.shape}",
    )
    batch, time, width = q.shape
    _contract(
        width % n_heads == 0,
        "attention",
        f"d_model {width} not divisible by {n_heads} heads",
    )
    head_dim = width // n_heads
    dtype = q.data.dtype
    factor = dtype.type(1.0 / math.sqrt(head_dim))

    def split(a: np.ndarray) -> np.ndarray:
        return a.reshape(batch, time, n_heads, head_dim).transpose(0, 2, 1, 3)

    def merge(a: np.ndarray) -> np.ndarray:
        return a.transpose(0, 2, 1, 3).reshape(batch, time, width)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * factor
    mask = np.triu(np.ones((time, time), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = merge(np.matmul(weights, vh))

    def grad_fn(g):
        gh = split(g)
        grad_weights = np.matmul(gh, vh.transpose(0, 1, 3, 2))
        grad_v = np.matmul(weights.transpose(0, 1, 3, 2), gh)
        grad_scores = weights * (
            grad_weights - (weights * grad_weights).sum(axis=-1, keepdims=True)
        )
        grad_q = np.matmul(grad_scores, kh) * factor
        grad_k = np.matmul(grad_scores.transpose(0, 1, 3, 2), qh) * factor
        return merge(grad_q), merge(grad_k), merge(grad_v)

    return node("attention", out, (q, k, v), grad_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of ``targets`` under softmax(``logits``).

    ``targets`` has the shape of ``logits`` without the class axis;
    entries < 0 are ignored.
    """
    targets = np.asarray(targets)
    n_classes = logits.shape[-1]
    _contract(
        targets.shape == logits.shape[:-1],
        "cross_entropy",
        f"targets {targets.shape} do not match logits {logits.shape}",
    )
    _contract(
        targets.max(initial=-1) < n_classes,
        "cross_entropy",
        f"target ids out of range for {n_classes} classes",
    )
    dtype = logits.data.dtype
    flat = logits.data.reshape(-1, n_classes)
    tgt = targets.reshape(-1)
    keep = tgt >= 0
    count = int(keep.sum())
    _contract(count > 0, "cross_entropy", "no target positions to score")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.nonzero(keep)[0]
    picked = shifted[rows, tgt[rows]] - lse[rows, 0]
    loss = np.asarray(-picked.sum(dtype=np.float64) / count, dtype=dtype)

    def grad_fn(g):
        probs = np.exp(shifted - lse)
        probs[rows, tgt[rows]] -= 1
        probs[~keep] = 0
        grad = probs * (g / dtype.type(count))
        return (grad.reshape(logits.shape).astype(dtype),)

    return node("cross_entropy", loss, (logits,), grad_fn)


def straight_through(
    x: Tensor,
    forward_fn: Callable[[np.ndarray], np.ndarray],
    op: str = "fake_quantize",
) -> Tensor:
    """Apply ``forward_fn`` forward and :func:`ste_gradient` backward."""

    def grad_fn(g):
        return (ste_gradient(g),)

    return node(op, forward_fn(x.data), (x,), grad_fn)
