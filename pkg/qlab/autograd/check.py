"""
Central finite differences, the oracle for :func:`qlab.autograd.backward`.
"""

import logging
from collections.abc import Callable, Iterable, Mapping

import numpy as np

from qlab.autograd.graph import GradientMap
from qlab.base import ContractViolation

log = logging.getLogger(__name__)

type Evaluator = Callable[[Mapping[str, np.ndarray]], float]
type Coordinate = tuple[str, int]


def finite_difference_gradient(
    evaluator: Evaluator,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-3,
    coordinates: Iterable[Coordinate] | None = None,
) -> GradientMap:
    """
    Estimate the gradient of ``evaluator`` at ``params`` coordinate-wise.

    Each probed coordinate i gets (f(p + eps e_i) - f(p - eps e_i)) / 2 eps.
    When ``coordinates`` lists (name, flat index) pairs only those are
    probed and the remaining entries are NaN.

    The evaluator receives copies: ``params`` is never modified.
    """
    if eps <= 0:
        raise ContractViolation(
            f"eps must be positive, got {eps}",
            module="autograd",
            operation="finite_difference_gradient",
        )
    work = {name: np.array(value, copy=True) for name, value in params.items()}
    if coordinates is None:
        grads = {name: np.zeros_like(value) for name, value in work.items()}
        coordinates = [
            (name, i) for name, value in work.items() for i in range(value.size)
        ]
    else:
        grads = {
            name: np.full_like(value, np.nan) for name, value in work.items()
        }

    probed = 0
    for name, index in coordinates:
        probed += 1
        flat = work[name].reshape(-1)
        original = flat[index]
        flat[index] = original + eps
        upper = float(evaluator(work))
        flat[index] = original - eps
        lower = float(evaluator(work))
        flat[index] = original
        grads[name].reshape(-1)[index] = (upper - lower) / (2 * eps)
    log.debug("Probed %d coordinates with eps=%g", probed, eps)
    return grads
