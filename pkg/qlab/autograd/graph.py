"""
Graph nodes and the reverse-mode sweep.

Every kernel returns a :class:`Tensor` remembering its parents and a
closure mapping the upstream gradient to one gradient per parent.
Nodes that do not depend on a trainable leaf keep no parents, so a pure
evaluation never builds a graph.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from qlab.base import ContractViolation, NumericFault

log = logging.getLogger(__name__)

type GradientMap = dict[str, np.ndarray]
type BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A dense float array plus the bookkeeping needed by :func:`backward`."""

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "grad_fn")

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        grad_fn: BackwardFn | None = None,
    ):
        self.data: np.ndarray = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn

    @classmethod
    def parameter(cls, data, name: str) -> "Tensor":
        """A named trainable leaf."""
        return cls(data, requires_grad=True, name=name)

    @classmethod
    def constant(cls, data) -> "Tensor":
        return cls(data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.grad_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(
                f"item() needs a scalar, got shape {self.shape}",
                module="autograd",
                operation="item",
            )
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.data.dtype})"


def node(
    op: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    grad_fn: BackwardFn,
) -> Tensor:
    """Wrap a kernel output, checking it is finite."""
    if not np.isfinite(data).all():
        raise NumericFault(
            f"kernel {op!r} produced non-finite values",
            module="autograd",
            operation=op,
        )
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(
        data,
        requires_grad=True,
        op=op,
        parents=tuple(parents),
        grad_fn=grad_fn,
    )


@dataclass(frozen=True)
class ComputationGraph:
    """The nodes reachable from an output, inputs before consumers."""

    nodes: tuple[Tensor, ...]

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationGraph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            current, expanded = stack.pop()
            if expanded:
                order.append(current)
                continue
            if id(current) in visited:
                continue
            visited.add(id(current))
            stack.append((current, True))
            for parent in current.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(tuple(order))

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(
    loss: Tensor, graph: ComputationGraph | None = None
) -> GradientMap:
    """
    Gradients of a scalar loss with respect to every named trainable leaf.

    Leaves reached by the graph but receiving no gradient get zeros, so
    the result holds one entry per trainable parameter feeding the loss.
    """
    if loss.data.size != 1:
        raise ContractViolation(
            f"loss must be a scalar node, got shape {loss.shape}",
            module="autograd",
            operation="backward",
        )
    graph = graph or ComputationGraph.trace(loss)
    if not loss.requires_grad:
        return {}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: GradientMap = {}
    for current in reversed(graph.nodes):
        upstream = grads.pop(id(current), None)
        if current.is_leaf:
            if not current.requires_grad or current.name is None:
                continue
            if upstream is None:
                upstream = np.zeros_like(current.data)
            result[current.name] = upstream
            continue
        if upstream is None:
            continue
        assert current.grad_fn is not None
        for parent, grad in zip(
            current.parents, current.grad_fn(upstream), strict=True
        ):
            if grad is None or not parent.requires_grad:
                continue
            if not np.isfinite(grad).all():
                raise NumericFault(
                    f"non-finite gradient flowing out of {current.op!r}",
                    module="autograd",
                    operation="backward",
                )
            if grad.shape != parent.shape:
                raise ContractViolation(
                    f"{current.op!r} returned gradient {grad.shape}"
                    f" for a parent of shape {parent.shape}",
                    module="autograd",
                    operation="backward",
                )
            key = id(parent)
            grads[key] = grads[key] + grad if key in grads else grad
    return result
