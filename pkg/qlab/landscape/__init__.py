"""
Loss-landscape probes around the pretrained weight vector w.

Coordinates are the quantized-weight vector of :meth:`Parameters.flatten`;
everything else (embeddings, head, layernorms, biases) stays at its
pretrained value. Probes never modify the base parameters: every point is
evaluated on an ephemeral copy.

- radial profiles: loss at w + lambda * e for a random unit direction e;
- segments: loss along (1 - t) w_a + t w_b between two solutions;
- basin radius R(w): where the median radial loss has risen by a given
  fraction of the way from the loss at w to the plateau loss.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from qlab.base import (
    DTYPE,
    BasinEstimateRefused,
    ContractViolation,
    NumericFault,
)
from qlab.lm import Parameters, evaluate_nll
from qlab.utils import derive_seed

log = logging.getLogger(__name__)

RADIAL = "radial"
SEGMENT = "segment"
POINT = "point"

PLATEAU_FRACTION = 0.2
PLATEAU_TOLERANCE = 0.05


@dataclass(frozen=True)
class Direction:
    vector: np.ndarray = field(repr=False)
    seed: int

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def sample_unit_direction(dim: int, seed: int) -> Direction:
    """A direction drawn uniformly from the unit sphere of R^dim."""
    if dim < 1:
        raise ContractViolation(
            f"dimension must be >= 1, got {dim}",
            module="landscape",
            operation="sample_unit_direction",
        )
    vector = np.random.default_rng(seed).standard_normal(dim)
    return Direction(vector / np.linalg.norm(vector), seed)


def weight_distance(w_a: np.ndarray, w_b: np.ndarray) -> float:
    """Euclidean distance between two weight vectors, in binary64."""
    w_a, w_b = np.asarray(w_a), np.asarray(w_b)
    if w_a.shape != w_b.shape:
        raise ContractViolation(
            f"vectors of shape {w_a.shape} and {w_b.shape}",
            module="landscape",
            operation="weight_distance",
        )
    return float(np.linalg.norm(w_a.astype(np.float64) - w_b.astype(np.float64)))


@dataclass(frozen=True)
class LossSample:
    x: float
    distance: float
    train_nll: float
    val_nll: float

    @property
    def saturated(self) -> bool:
        return not (math.isfinite(self.train_nll) and math.isfinite(self.val_nll))


@dataclass(frozen=True)
class LossProfile:
    """
    Loss samples along one line; ``x`` is lambda (radial) or t (segment).

    A sample whose loss overflowed holds ``inf`` in both NLL columns and is
    flagged by :attr:`LossSample.saturated`.
    """

    kind: str
    anchor_a: str
    anchor_b: str
    samples: tuple[LossSample, ...]
    seed: int | None = None

    def __post_init__(self):
        xs = [s.x for s in self.samples]
        if any(a >= b for a, b in zip(xs, xs[1:])):
            raise ContractViolation(
                f"{self.kind} abscissae must be strictly increasing",
                module="landscape",
                operation=f"{self.kind}_profile",
            )
        if any(s.distance < 0 for s in self.samples):
            raise ContractViolation(
                "distances must be non-negative",
                module="landscape",
                operation=f"{self.kind}_profile",
            )

    @property
    def xs(self) -> np.ndarray:
        return np.array([s.x for s in self.samples])

    def losses(self, split: str = "train") -> np.ndarray:
        return np.array([getattr(s, f"{split}_nll") for s in self.samples])

    def rows(self) -> list[dict]:
        return [
            {
                "kind": self.kind,
                "anchor_a": self.anchor_a,
                "anchor_b": self.anchor_b,
                "seed": self.seed,
                "t_or_lambda": s.x,
                "distance": s.distance,
                "train_nll": s.train_nll,
                "val_nll": s.val_nll,
            }
            for s in self.samples
        ]


class LossProbe:
    """
    Train and validation NLL of the network at arbitrary weight vectors.

    Non-finite losses are reported as ``inf`` instead of raising.
    """

    def __init__(
        self,
        params: Parameters,
        train: np.ndarray,
        val: np.ndarray,
        batch_size: int = 32,
        workers: int = 1,
    ):
        self.params = params
        self.train = train
        self.val = val
        self.batch_size = batch_size
        self.workers = workers
        self.origin = params.flatten().astype(np.float64)

    @property
    def dim(self) -> int:
        return self.origin.shape[0]

    def losses_at(self, vector: np.ndarray) -> tuple[float, float]:
        probe = self.params.unflatten(np.asarray(vector).astype(DTYPE))
        try:
            return (
                evaluate_nll(probe, self.train, batch_size=self.batch_size),
                evaluate_nll(probe, self.val, batch_size=self.batch_size),
            )
        except NumericFault as e:
            log.debug("Saturated probe: %s", e)
            return math.inf, math.inf

    def evaluate_many(
        self, vectors: Sequence[np.ndarray]
    ) -> list[tuple[float, float]]:
        if self.workers > 1 and len(vectors) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(self.losses_at, vectors))
        return [self.losses_at(v) for v in vectors]


def _check_abscissae(values: Sequence[float], operation: str, last=None):
    values = list(values)
    if not values or values[0] != 0:
        raise ContractViolation(
            "sample abscissae must start at 0",
            module="landscape",
            operation=operation,
        )
    if last is not None and values[-1] != last:
        raise ContractViolation(
            f"sample abscissae must end at {last}",
            module="landscape",
            operation=operation,
        )
    if any(a >= b for a, b in zip(values, values[1:])):
        raise ContractViolation(
            "sample abscissae must be strictly increasing",
            module="landscape",
            operation=operation,
        )


def radial_profile(
    probe: LossProbe,
    direction: Direction,
    radii: Sequence[float],
    base: np.ndarray | None = None,
    anchor: str = "w",
) -> LossProfile:
    """Losses at base + lambda * e; the distance column equals lambda."""
    _check_abscissae(radii, "radial_profile")
    base = probe.origin if base is None else np.asarray(base, dtype=np.float64)
    if direction.dim != base.shape[0]:
        raise ContractViolation(
            f"direction has {direction.dim} coordinates, weights {base.shape[0]}",
            module="landscape",
            operation="radial_profile",
        )
    points = [base + float(lam) * direction.vector for lam in radii]
    losses = probe.evaluate_many(points)
    samples = tuple(
        LossSample(float(lam), float(lam), train, val)
        for lam, (train, val) in zip(radii, losses)
    )
    return LossProfile(
        RADIAL, anchor, f"direction-{direction.seed}", samples, direction.seed
    )


def segment_profile(
    probe: LossProbe,
    w_a: np.ndarray,
    w_b: np.ndarray,
    ts: Sequence[float],
    anchors: tuple[str, str] = ("a", "b"),
) -> LossProfile:
    """
    Losses along (1 - t) w_a + t w_b.

    The distance column is measured from the pretrained weights of the
    probe, not from ``w_a``.
    """
    _check_abscissae(ts, "segment_profile", last=1)
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    if w_a.shape != w_b.shape or w_a.shape[0] != probe.dim:
        raise ContractViolation(
            f"segment endpoints {w_a.shape}, {w_b.shape} in R^{probe.dim}",
            module="landscape",
            operation="segment_profile",
        )
    points = [(1 - float(t)) * w_a + float(t) * w_b for t in ts]
    losses = probe.evaluate_many(points)
    samples = tuple(
        LossSample(
            float(t),
            weight_distance(point.astype(DTYPE), probe.origin),
            train,
            val,
        )
        for t, point, (train, val) in zip(ts, points, losses)
    )
    return LossProfile(SEGMENT, anchors[0], anchors[1], samples)


def radial_profiles(
    probe: LossProbe,
    radii: Sequence[float],
    n_directions: int,
    seed: int,
) -> list[LossProfile]:
    """``n_directions`` radial profiles around w with derived seeds."""
    return [
        radial_profile(
            probe,
            sample_unit_direction(probe.dim, derive_seed(seed, "landscape", i)),
            radii,
        )
        for i in range(n_directions)
    ]


def default_radii(
    distances: Sequence[float],
    n: int = 32,
    low_factor: float = 1e-2,
    high_factor: float = 4.0,
) -> list[float]:
    """
    Zero followed by ``n`` log-spaced radii.

    They run from ``low_factor`` times the smallest to ``high_factor``
    times the largest RTN distance, that is from INT8 to INT2.
    """
    positive = [d for d in distances if d > 0]
    if not positive:
        raise ContractViolation(
            "need at least one positive RTN distance",
            module="landscape",
            operation="radial_profile",
        )
    low, high = low_factor * min(positive), high_factor * max(positive)
    return [0.0, *np.geomspace(low, high, n).tolist()]


@dataclass(frozen=True)
class BasinEstimate:
    base_loss: float
    plateau_loss: float
    radius: float
    threshold: float
    split: str
    n_profiles: int
    n_plateau: int

    def contains(self, distance: float) -> bool:
        return distance < self.radius


def reaches_plateau(
    losses: np.ndarray,
    fraction: float = PLATEAU_FRACTION,
    tolerance: float = PLATEAU_TOLERANCE,
) -> bool:
    """The last ``fraction`` of the samples vary by less than ``tolerance``."""
    k = max(2, math.ceil(fraction * len(losses)))
    tail = np.asarray(losses[-k:], dtype=np.float64)
    if not np.isfinite(tail).all():
        return False
    scale = abs(float(np.mean(tail)))
    if scale == 0:
        return bool(np.ptp(tail) == 0)
    return float(np.ptp(tail)) / scale < tolerance


def basin_radius(
    profiles: Sequence[LossProfile],
    threshold: float = 0.5,
    split: str = "train",
    fraction: float = PLATEAU_FRACTION,
    tolerance: float = PLATEAU_TOLERANCE,
) -> BasinEstimate:
    """
    R(w): the radius where the median loss rises past
    L0 + threshold * (Linf - L0).

    L0 is the loss at lambda = 0 and Linf the median over the plateau tail
    of the profiles that reach one. The crossing is linearly interpolated
    between samples.
    """
    if not profiles:
        raise ContractViolation(
            "no radial profiles",
            module="landscape",
            operation="basin_radius",
        )
    if not 0 < threshold <= 1:
        raise ContractViolation(
            f"threshold must be in (0, 1], got {threshold}",
            module="landscape",
            operation="basin_radius",
        )
    radii = profiles[0].xs
    for p in profiles:
        if p.kind != RADIAL or not np.array_equal(p.xs, radii):
            raise ContractViolation(
                "basin radius needs radial profiles over common radii",
                module="landscape",
                operation="basin_radius",
            )
    losses = np.stack([p.losses(split) for p in profiles])
    saturated = sum(s.saturated for p in profiles for s in p.samples)
    if saturated:
        log.warning("%d radial samples saturated to a non-finite loss", saturated)
    plateau = [reaches_plateau(row, fraction, tolerance) for row in losses]
    if not any(plateau):
        raise BasinEstimateRefused(
            "no profile reaches a plateau: extend radii",
            module="landscape",
            operation="basin_radius",
        )
    k = max(2, math.ceil(fraction * losses.shape[1]))
    base_loss = float(np.median(losses[:, 0]))
    plateau_loss = float(np.median(losses[np.array(plateau)][:, -k:]))
    if not plateau_loss > base_loss:
        raise BasinEstimateRefused(
            f"plateau loss {plateau_loss:.6g} does not rise above"
            f" base loss {base_loss:.6g}",
            module="landscape",
            operation="basin_radius",
        )
    target = base_loss + threshold * (plateau_loss - base_loss)
    curve = np.median(losses, axis=0)
    above = np.nonzero(curve >= target)[0]
    if len(above) == 0:
        raise BasinEstimateRefused(
            f"median loss never reaches {target:.6g}: extend radii",
            module="landscape",
            operation="basin_radius",
        )
    j = int(above[0])
    if j == 0:
        radius = float(radii[0])
    else:
        lo, hi = curve[j - 1], curve[j]
        frac = (target - lo) / (hi - lo) if math.isfinite(hi) else 0.0
        radius = float(radii[j - 1] + frac * (radii[j] - radii[j - 1]))
    log.info(
        "Basin radius %.6g (L0 %.4f, Linf %.4f, %d/%d plateaus)",
        radius,
        base_loss,
        plateau_loss,
        sum(plateau),
        len(profiles),
    )
    return BasinEstimate(
        base_loss=base_loss,
        plateau_loss=plateau_loss,
        radius=radius,
        threshold=threshold,
        split=split,
        n_profiles=len(profiles),
        n_plateau=sum(plateau),
    )


__all__ = [
    "POINT",
    "RADIAL",
    "SEGMENT",
    "BasinEstimate",
    "Direction",
    "LossProbe",
    "LossProfile",
    "LossSample",
    "basin_radius",
    "default_radii",
    "radial_profile",
    "radial_profiles",
    "reaches_plateau",
    "sample_unit_direction",
    "segment_profile",
    "weight_distance",
]
