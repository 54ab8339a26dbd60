"""Future alignment of incoming frames to the memory's keyframe coordinates.

Ego motion is removed with the forecast pose; object motion is undone with
one of the strategies below.  ``Q`` is any callable mapping an ``(n, 3)``
array of positions to ``(n, 3)`` forward-flow vectors (zero off support).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import RigidTransform, SpatialIndex, pack_keys, voxel_keys
from .memory import HIT_DIRECT, HIT_FALLBACK, VoxelMemory

STRATEGIES = ("none", "backward_flow", "forward_flow", "inverse_single", "inverse_brute", "inverse_iteration")
# CLI spellings
CLI_ALIASES = {
    "none": "none",
    "backward": "backward_flow",
    "forward": "forward_flow",
    "inverse1": "inverse_single",
    "brute": "inverse_brute",
    "iterate": "inverse_iteration",
}


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentStrategy:
    kind: str = "inverse_iteration"
    eps: float = 1e-3
    n_max: int = 10
    brute_radius: Optional[float] = None  # default 3 * voxel_size

    def __post_init__(self):
        kind = CLI_ALIASES.get(self.kind, self.kind)
        if kind not in STRATEGIES:
            raise AlignmentError(f"unknown alignment strategy {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not self.eps > 0:
            raise AlignmentError("eps must be positive")
        if self.n_max < 1:
            raise AlignmentError("n_max must be at least 1")
        if self.brute_radius is not None and not self.brute_radius > 0:
            raise AlignmentError("brute search radius must be positive")


@dataclass
class AlignmentResult:
    points: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray

    @property
    def convergence_rate(self) -> float:
        return float(self.converged.mean()) if len(self.converged) else 1.0


def ego_align(points: np.ndarray, forecast: RigidTransform) -> np.ndarray:
    """Map frame-(t+m) points into keyframe-t coordinates given ``p_{t->t+m}``."""
    return forecast.inverse().apply(points)


def inverse_single(p: np.ndarray, Q: Callable) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p - Q(p)


def inverse_flow_iteration(p: np.ndarray, Q: Callable, eps: float = 1e-3, n_max: int = 10, fallback: bool = False) -> AlignmentResult:
    """Fixed-point iteration ``x <- p - Q(x)`` from ``x = p``.

    Per point, iterate while ``||(x - p) + Q(x)|| >= eps`` and fewer than
    ``n_max`` steps were taken.  Points that never meet the tolerance keep
    their last iterate, or get the single-step result when ``fallback`` is
    set.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    x = p.copy()
    n = np.zeros(len(p), dtype=np.int64)
    conv = np.zeros(len(p), dtype=bool)
    active = np.arange(len(p))
    q0 = None
    while len(active):
        q = Q(x[active])
        if q0 is None:
            q0 = q.copy()
        res = np.linalg.norm(x[active] - p[active] + q, axis=1)
        done = res < eps
        conv[active[done]] = True
        active, q = active[~done], q[~done]
        stuck = n[active] >= n_max
        active, q = active[~stuck], q[~stuck]
        x[active] = p[active] - q
        n[active] += 1
    if fallback and q0 is not None:
        bad = ~conv
        x[bad] = p[bad] - q0[bad]
    return AlignmentResult(x, conv, n)


def backward_flow_align(p: np.ndarray, backward_field: Callable) -> np.ndarray:
    """Single-shot ``p + B(p)``."""
    p = np.asarray(p, dtype=np.float64)
    return p + backward_field(p)


def negated(Q: Callable) -> Callable:
    """Backward field forecast as the negated forward flow at the query location."""
    return lambda x: -Q(x)


def inverse_brute_search(p: np.ndarray, candidates: np.ndarray, Q: Callable, radius: float, index: Optional[SpatialIndex] = None):
    """For each query, the candidate ``x`` minimising ``||x + Q(x) - p||``.

    The search ball of ``radius`` is centred on the single-step estimate
    ``p - Q(p)``.  Returns ``(points, found)``; unfound queries keep that
    estimate.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if not radius > 0:
        raise AlignmentError("radius must be positive")
    start = p - Q(p)
    out = start.copy()
    found = np.zeros(len(p), dtype=bool)
    if len(candidates) == 0 or len(p) == 0:
        return out, found
    index = index or SpatialIndex(candidates)
    lists = index.ball_query(start, radius)
    lens = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    if lens.sum() == 0:
        return out, found
    cand = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists if len(l)])
    owner = np.repeat(np.arange(len(p)), lens)
    xs = index.points[cand]
    # flow is evaluated once per distinct candidate
    uc, inv = np.unique(cand, return_inverse=True)
    fwd = index.points[uc] + Q(index.points[uc])
    err = np.linalg.norm(fwd[inv] - p[owner], axis=1)
    order = np.lexsort((cand, err, owner))
    first = np.ones(len(order), dtype=bool)
    first[1:] = owner[order][1:] != owner[order][:-1]
    best = order[first]
    out[owner[best]] = xs[best]
    found[owner[best]] = True
    return out, found


@dataclass
class ForwardAligned:
    """Memory whose voxel centres were pushed forward by the flow (unquantised)."""

    memory: VoxelMemory
    moved_centers: np.ndarray
    index: Optional[SpatialIndex]
    rebucketed: VoxelMemory
    build_seconds: float

    def query(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx, _ = self.index.nn_query(points)
        vs = self.memory.voxel_size
        same = np.all(voxel_keys(points, vs) == voxel_keys(self.moved_centers[idx], vs), axis=1)
        kind = np.where(same, HIT_DIRECT, HIT_FALLBACK).astype(np.int8)
        return self.memory.h[idx], kind


def forward_flow_align(memory: VoxelMemory, field: Callable) -> ForwardAligned:
    """Move every memory voxel centre by its forecast flow and rebuild the index."""
    from .memory import align_memory

    t0 = time.perf_counter()
    centers = memory.centers
    moved = centers + field(centers) if len(centers) else centers
    index = SpatialIndex(moved) if len(moved) else None
    build = time.perf_counter() - t0
    rebucketed = align_memory(memory, RigidTransform.identity(), moved - centers) if len(centers) else memory
    return ForwardAligned(memory, moved, index, rebucketed, build)


def align_points(points_kf: np.ndarray, strategy: AlignmentStrategy, Q: Optional[Callable], memory: Optional[VoxelMemory] = None):
    """Dynamic alignment of ego-aligned points; returns ``(points, AlignmentResult)``.

    ``forward_flow`` is not point-wise and is handled by the caller.
    """
    n = len(points_kf)
    ones = np.ones(n, dtype=bool)
    zeros = np.zeros(n, dtype=np.int64)
    if Q is None or strategy.kind in ("none", "forward_flow"):
        return points_kf, AlignmentResult(points_kf, ones, zeros)
    if strategy.kind == "inverse_iteration":
        res = inverse_flow_iteration(points_kf, Q, strategy.eps, strategy.n_max)
        return res.points, res
    if strategy.kind == "inverse_single":
        out = inverse_single(points_kf, Q)
        return out, AlignmentResult(out, ones, np.ones(n, dtype=np.int64))
    if strategy.kind == "backward_flow":
        out = backward_flow_align(points_kf, negated(Q))
        return out, AlignmentResult(out, ones, np.ones(n, dtype=np.int64))
    if strategy.kind == "inverse_brute":
        if memory is None or len(memory) == 0:
            raise AlignmentError("brute search needs a non-empty memory")
        radius = strategy.brute_radius or 3 * memory.voxel_size
        out, found = inverse_brute_search(points_kf, memory.centers, Q, radius, memory.index)
        return out, AlignmentResult(out, found, found.astype(np.int64))
    raise AlignmentError(f"unhandled strategy {strategy.kind}")


def voxel_hit_rate(points: np.ndarray, memory: VoxelMemory) -> float:
    """Fraction of points whose voxel is occupied in the memory."""
    if len(points) == 0:
        return 0.0
    return float((memory.lookup(pack_keys(voxel_keys(points, memory.voxel_size))) >= 0).mean())
