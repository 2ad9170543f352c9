"""Isovelocity image-method propagation for a single receiver.

Three straight-ray paths are modelled between a source and a receiver in a
water column of constant depth: the direct path (DP), the bottom bounce (BB)
and the bottom-surface bounce (BSB).  Reflections are handled by mirroring the
receiver depth across the boundaries, so every path length is a plain
Euclidean distance in the (range, depth) plane.

The receiver is the horizontal origin at every scan; ``range`` is always the
horizontal source-to-receiver distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class PathKind(IntEnum):
    DP = 0
    BB = 1
    BSB = 2


@dataclass(frozen=True)
class PathPair:
    """Ordered pair of paths; ``index`` is the 1-based pair number ``l``."""

    index: int
    first: PathKind
    second: PathKind

    @property
    def name(self) -> str:
        return f"{self.first.name}_{self.second.name}"


# Public ordering: d_1, d_2, d_3 in config files refer to these positions.
PAIRS: tuple[PathPair, ...] = (
    PathPair(1, PathKind.DP, PathKind.BB),
    PathPair(2, PathKind.DP, PathKind.BSB),
    PathPair(3, PathKind.BB, PathKind.BSB),
)
N_PATHS = len(PathKind)
N_PAIRS = len(PAIRS)


@dataclass(frozen=True)
class Environment:
    seafloor_depth: float = 65.0
    sound_speed: float = 1508.0

    def __post_init__(self):
        if not self.seafloor_depth > 0:
            raise ValueError(f"seafloor_depth must be > 0, got {self.seafloor_depth}")
        if not self.sound_speed > 0:
            raise ValueError(f"sound_speed must be > 0, got {self.sound_speed}")


@dataclass(frozen=True)
class ReceiverState:
    depth: float

    def check(self, env: Environment) -> None:
        if not 0.0 <= self.depth <= env.seafloor_depth:
            raise ValueError(
                f"receiver depth {self.depth} outside [0, {env.seafloor_depth}]"
            )


@dataclass(frozen=True)
class SourceState:
    range: float
    depth: float = 0.0
    range_speed: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.range, self.depth, self.range_speed], dtype=float)

    @classmethod
    def from_array(cls, x) -> "SourceState":
        return cls(float(x[0]), float(x[1]), float(x[2]))


def image_depths(receiver_depth, seafloor_depth):
    """Imaged receiver depths for DP, BB, BSB stacked on a trailing axis."""
    h = np.asarray(receiver_depth, dtype=float)
    z = float(seafloor_depth)
    return np.stack([h, 2.0 * z - h, 2.0 * z + h], axis=-1)


def image_depth(path: PathKind, receiver: ReceiverState, env: Environment) -> float:
    h = receiver.depth
    z = env.seafloor_depth
    if path is PathKind.DP:
        return h
    if path is PathKind.BB:
        return 2.0 * z - h
    return 2.0 * z + h


def path_length(
    path: PathKind, src: SourceState, receiver: ReceiverState, env: Environment
) -> float:
    i_k = image_depth(path, receiver, env)
    return float(np.hypot(src.depth - i_k, src.range))


def path_lengths(ranges, depths, receiver_depth, env: Environment) -> np.ndarray:
    """Vectorised path lengths, shape ``(..., 3)`` ordered DP, BB, BSB."""
    r = np.asarray(ranges, dtype=float)[..., None]
    p2 = np.asarray(depths, dtype=float)[..., None]
    return np.hypot(p2 - image_depths(receiver_depth, env.seafloor_depth), r)


def _length_difference(ia, ib, depth, qa, qb):
    # q_a - q_b written without subtracting nearly equal lengths:
    # q_a^2 - q_b^2 = (i_a - i_b)(i_a + i_b - 2 p2), the range term cancels
    num = (ia - ib) * (ia + ib - 2.0 * depth)
    den = qa + qb
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def predict_tdoa(
    pair: PathPair, src: SourceState, receiver: ReceiverState, env: Environment
) -> float:
    ia = image_depth(pair.first, receiver, env)
    ib = image_depth(pair.second, receiver, env)
    qa = path_length(pair.first, src, receiver, env)
    qb = path_length(pair.second, src, receiver, env)
    return float(abs(_length_difference(ia, ib, src.depth, qa, qb)) / env.sound_speed)


def predict_tdoas(ranges, depths, receiver_depth, env: Environment) -> np.ndarray:
    """Predicted TDOAs for all pairs, shape ``(..., 3)`` in pair order.

    Works on particle arrays: ``ranges`` and ``depths`` broadcast together,
    ``receiver_depth`` is a scalar for the scan.
    """
    p2 = np.asarray(depths, dtype=float)[..., None]
    img = image_depths(receiver_depth, env.seafloor_depth)
    q = np.hypot(p2 - img, np.asarray(ranges, dtype=float)[..., None])
    first = [p.first for p in PAIRS]
    second = [p.second for p in PAIRS]
    diff = _length_difference(
        img[..., first], img[..., second], p2, q[..., first], q[..., second]
    )
    return np.abs(diff) / env.sound_speed


def feasible(
    pair: PathPair, src: SourceState, receiver: ReceiverState, env: Environment
) -> bool:
    """Whether both paths of ``pair`` exist as distinct rays.

    A pair whose two image depths coincide (receiver on the bottom for DP/BB,
    receiver at the surface for BB/BSB) produces a TDOA of zero at every range
    and is reported infeasible.
    """
    return bool(
        feasible_mask(src.depth, receiver.depth, env)[pair.index - 1]
    )


def feasible_mask(depths, receiver_depth, env: Environment) -> np.ndarray:
    """Boolean feasibility, shape ``(..., 3)`` in pair order."""
    z = env.seafloor_depth
    p2 = np.asarray(depths, dtype=float)
    h = float(receiver_depth)
    inside = (p2 >= 0.0) & (p2 <= z) & (0.0 <= h <= z)
    img = image_depths(h, z)
    distinct = np.array([img[p.first] != img[p.second] for p in PAIRS])
    return inside[..., None] & distinct
