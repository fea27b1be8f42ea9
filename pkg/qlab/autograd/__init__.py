"""
A small reverse-mode automatic differentiation engine over numpy arrays.

The kernel set is the one needed by the toy transformer in :mod:`qlab.lm`:
build a loss out of :mod:`qlab.autograd.kernels` applied to
:meth:`Tensor.parameter` leaves, then call :func:`backward`.

    w = Tensor.parameter(np.array([3.0]), "w")
    loss = sum_all(mul(w, w))
    backward(loss)["w"]  # array([6.])
"""

from qlab.autograd.check import finite_difference_gradient
from qlab.autograd.graph import (
    ComputationGraph,
    GradientMap,
    Tensor,
    backward,
    node,
)
from qlab.autograd.kernels import (
    add,
    causal_attention,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    scale,
    ste_gradient,
    straight_through,
    sum_all,
    transpose,
)

__all__ = [
    "ComputationGraph",
    "GradientMap",
    "Tensor",
    "add",
    "backward",
    "causal_attention",
    "cross_entropy",
    "embedding",
    "finite_difference_gradient",
    "gelu",
    "layer_norm",
    "linear",
    "matmul",
    "mul",
    "node",
    "scale",
    "ste_gradient",
    "straight_through",
    "sum_all",
    "transpose",
]
