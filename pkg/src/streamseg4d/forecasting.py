"""Ego-pose estimation, pose/flow memories and m-frame forecasts.

Poses follow one convention throughout: ``p_{a->b}`` maps frame-a ego
coordinates into frame-b ego coordinates.  Flows are object motion only,
expressed in the ego coordinates of the frame they are attached to.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    DEFAULT_VOXEL_SIZE,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    TwistVector,
    interpolate,
    kabsch,
    pack_keys,
    se3_exp,
    se3_log,
    unpack_keys,
    voxel_centers,
    voxel_keys,
)

log = logging.getLogger(__name__)

M_MAX = 10


class PoseEstimationError(RuntimeError):
    pass


class ForecastError(ValueError):
    pass


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------- ICP


def icp(
    src: np.ndarray,
    dst: np.ndarray,
    init: RigidTransform = RigidTransform.identity(),
    max_iter: int = 20,
    tol: float = 1e-4,
    trim: float = 0.8,
    dst_index: Optional[SpatialIndex] = None,
):
    """Trimmed point-to-point ICP; returns ``(T, iterations)`` with ``T`` mapping src onto dst."""
    index = dst_index or SpatialIndex(dst)
    T = init
    n_keep = max(3, int(math.ceil(trim * len(src))))
    it = 0
    for it in range(1, max_iter + 1):
        moved = T.apply(src)
        idx, dist = index.nn_query(moved)
        keep = np.argpartition(dist, n_keep - 1)[:n_keep] if n_keep < len(src) else np.arange(len(src))
        step = kabsch(moved[keep], index.points[idx[keep]])
        T = step @ T
        if np.linalg.norm(step.translation) + step.angle() < tol:
            break
    return T, it


def _check_geometry(pts: np.ndarray, name: str, min_points: int):
    if len(pts) < min_points:
        raise PoseEstimationError(f"{name} keyframe has {len(pts)} points; at least {min_points} needed")
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[-1] / s[0] < 1e-9:
        raise PoseEstimationError(f"{name} keyframe geometry is degenerate (rank-deficient covariance)")


def _trimmed_residual(T: RigidTransform, src, index: SpatialIndex, trim: float) -> float:
    _, dist = index.nn_query(T.apply(src))
    return float(np.quantile(dist, trim))


def coarse_search(src, dst_index: SpatialIndex, init: RigidTransform, radius: float = 4.0, step: float = 0.5, yaws=(-0.1, -0.05, 0.0, 0.05, 0.1), n_sample: int = 200, trim: float = 0.5, seed: int = 0) -> RigidTransform:
    """Best planar offset of ``init`` on a translation/yaw grid, scored by a trimmed NN residual."""
    rng = np.random.default_rng(seed)
    sub = src[rng.choice(len(src), size=min(n_sample, len(src)), replace=False)]
    base = init.apply(sub)
    c = base.mean(axis=0)
    offs = np.arange(-radius, radius + 1e-9, step)
    best, best_T = np.inf, init
    for yaw in yaws:
        cy, sy = math.cos(yaw), math.sin(yaw)
        R = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        rot = (base - c) @ R.T + c
        for dx in offs:
            for dy in offs:
                _, dist = dst_index.nn_query(rot + (dx, dy, 0.0))
                score = float(np.quantile(dist, trim))
                if score < best:
                    best = score
                    best_T = RigidTransform(R, c - R @ c + (dx, dy, 0.0)) @ init
    return best_T


def estimate_pose(
    prev_key,
    cur_key,
    init: RigidTransform = RigidTransform.identity(),
    max_iter: int = 20,
    tol: float = 1e-4,
    trim: float = 0.8,
    min_points: int = 50,
    relocalize_above: Optional[float] = 0.05,
) -> RigidTransform:
    """Relative ego motion ``p_{prev->cur}`` between two keyframes.

    When the median residual after ICP exceeds ``relocalize_above`` (metres)
    the initial guess is replaced by a coarse planar grid search and ICP is
    run again; the lower-residual estimate wins.
    """
    src, dst = _points(prev_key), _points(cur_key)
    _check_geometry(src, "previous", min_points)
    _check_geometry(dst, "current", min_points)
    index = SpatialIndex(dst)
    T, _ = icp(src, dst, init, max_iter=max_iter, tol=tol, trim=trim, dst_index=index)
    if relocalize_above is None:
        return T
    # median residual: robust to a large share of moving points
    res = _trimmed_residual(T, src, index, 0.5)
    if res <= relocalize_above:
        return T
    T2, _ = icp(src, dst, coarse_search(src, index, init), max_iter=max_iter, tol=tol, trim=trim, dst_index=index)
    return T2 if _trimmed_residual(T2, src, index, 0.5) < res else T


# ---------------------------------------------------------------- pose memory


@dataclass(frozen=True)
class PoseMemory:
    """Exponentially smoothed per-frame twist, one state per forecast head.

    ``warm_start`` seeds every head with the first observation instead of
    averaging it against a zero state.
    """

    alphas: tuple = (0.8,) * M_MAX
    states: tuple = ()
    n_updates: int = 0
    warm_start: bool = True

    @staticmethod
    def create(alpha: float = 0.8, m_max: int = M_MAX, warm_start: bool = True) -> "PoseMemory":
        if not 0.0 <= alpha < 1.0:
            raise ForecastError("alpha must lie in [0, 1)")
        return PoseMemory(alphas=(float(alpha),) * m_max, states=(TwistVector.zero(),) * m_max, warm_start=warm_start)

    @property
    def m_max(self) -> int:
        return len(self.alphas)

    @property
    def twist(self) -> TwistVector:
        return self.states[0]


def update_pose_memory(mem: PoseMemory, p_rel: RigidTransform, gap_k: int) -> PoseMemory:
    if gap_k < 1:
        raise ForecastError("keyframe gap must be at least 1")
    xi = se3_log(p_rel).as_array() / gap_k
    new = []
    for a, s in zip(mem.alphas, mem.states):
        if mem.n_updates == 0 and mem.warm_start:
            new.append(TwistVector.from_array(xi))
        else:
            new.append(TwistVector.from_array(a * s.as_array() + (1.0 - a) * xi))
    return replace(mem, states=tuple(new), n_updates=mem.n_updates + 1)


def forecast_pose(mem: PoseMemory, m: int) -> RigidTransform:
    """Head m: ``p_{t->t+m} = exp(m * xi_m)``."""
    if not 1 <= m <= mem.m_max:
        raise ForecastError(f"horizon {m} outside 1..{mem.m_max}")
    return se3_exp(mem.states[m - 1].scaled(m))


# ---------------------------------------------------------------- flow fields


@dataclass
class FlowField:
    """Per-voxel flow vectors with the local query ``Q(p)``.

    ``Q(p)`` returns the vector of the nearest occupied voxel centre within
    ``radius``, or zero when there is none.
    """

    voxel_size: float
    codes: np.ndarray
    vectors: np.ndarray
    radius: float = 2 * DEFAULT_VOXEL_SIZE
    moving: Optional[np.ndarray] = None  # optional per-voxel flag used by the ``flag`` mask policy
    _index: Optional[SpatialIndex] = field(default=None, repr=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if len(self.codes) != len(self.vectors):
            raise ForecastError("flow field codes and vectors differ in length")
        if not np.all(np.isfinite(self.vectors)):
            raise ForecastError("flow field contains non-finite vectors")

    def __len__(self) -> int:
        return len(self.codes)

    @staticmethod
    def empty(voxel_size: float = DEFAULT_VOXEL_SIZE, radius: Optional[float] = None) -> "FlowField":
        r = 2 * voxel_size if radius is None else radius
        return FlowField(voxel_size, np.zeros(0, np.int64), np.zeros((0, 3)), r)

    @staticmethod
    def from_points(points, vectors, voxel_size: float = DEFAULT_VOXEL_SIZE, radius: Optional[float] = None, moving=None) -> "FlowField":
        """Voxel-mean of per-point vectors (moving flag: any point moving)."""
        points = _points(points)
        r = 2 * voxel_size if radius is None else radius
        if len(points) == 0:
            return FlowField.empty(voxel_size, r)
        codes = pack_keys(voxel_keys(points, voxel_size))
        uniq, inv, counts = np.unique(codes, return_inverse=True, return_counts=True)
        acc = np.zeros((len(uniq), 3))
        np.add.at(acc, inv, np.asarray(vectors, dtype=np.float64))
        mov = None
        if moving is not None:
            mov = np.zeros(len(uniq), dtype=bool)
            np.logical_or.at(mov, inv, np.asarray(moving, dtype=bool))
        return FlowField(voxel_size, uniq, acc / counts[:, None], r, mov)

    @property
    def centers(self) -> np.ndarray:
        return voxel_centers(unpack_keys(self.codes), self.voxel_size)

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.centers)
        return self._index

    def lookup(self, points):
        """``(vectors, found)``: nearest voxel within the radius, zero when absent."""
        points = _points(points)
        out = np.zeros((len(points), 3))
        if len(self) == 0 or len(points) == 0:
            return out, np.zeros(len(points), dtype=bool)
        idx, _ = self.index.nn_query(points, max_distance=self.radius)
        found = idx >= 0
        out[found] = self.vectors[idx[found]]
        return out, found

    def query(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        out = self.lookup(p.reshape(-1, 3))[0]
        return out[0] if p.ndim == 1 else out

    __call__ = query

    def scaled(self, s: float) -> "FlowField":
        """Same support, vectors multiplied by ``s`` (shares the spatial index)."""
        return replace(self, vectors=self.vectors * s)

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


@dataclass(frozen=True)
class MaskPolicy:
    """``none`` keeps every vector, ``threshold`` zeroes speeds below ``theta``,
    ``flag`` zeroes voxels whose moving flag (or an explicit mask) is false."""

    kind: str = "threshold"
    theta: Optional[float] = None  # m/frame; default voxel_size / 4

    def __post_init__(self):
        if self.kind not in ("none", "threshold", "flag"):
            raise ForecastError(f"unknown moving mask policy {self.kind!r}")


def apply_moving_mask(field: FlowField, policy: MaskPolicy = MaskPolicy(), mask=None, per_frame_scale: float = 1.0) -> FlowField:
    """Restrict the field to voxels classified as moving.

    Dropped voxels read as zero flow through ``Q`` unless a moving voxel lies
    within the query radius, so static neighbours no longer shadow the
    flow of nearby moving objects.  ``per_frame_scale`` converts the
    field's vectors to per-frame speeds when it is an m-frame forecast.
    """
    if policy.kind == "none" and mask is None:
        return field
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
    elif policy.kind == "threshold":
        theta = field.voxel_size / 4 if policy.theta is None else policy.theta
        keep = field.speeds() * per_frame_scale >= theta
    else:
        if field.moving is None:
            raise ForecastError("flag mask policy needs per-voxel moving flags")
        keep = field.moving
    if len(keep) != len(field):
        raise ForecastError("moving mask length differs from the field")
    return FlowField(
        field.voxel_size,
        field.codes[keep],
        field.vectors[keep],
        field.radius,
        None if field.moving is None else field.moving[keep],
    )


# ---------------------------------------------------------------- key flow


@dataclass
class KeyMotion:
    """Per-instance rigid motion between two keyframes, in current-keyframe coordinates."""

    gap: int
    transforms: Dict[int, RigidTransform] = field(default_factory=dict)

    def per_frame(self, inst: int) -> Optional[RigidTransform]:
        T = self.transforms.get(int(inst))
        return None if T is None else interpolate(T, 1.0 / self.gap)


def _spatial_inliers(pts: np.ndarray, spread: float = 3.0) -> np.ndarray:
    """Points within ``spread`` median distances of the coordinate-wise median.

    Mislabelled points of an instance are scattered over the scene; the
    body's own points form one compact cluster.
    """
    d = np.linalg.norm(pts - np.median(pts, axis=0), axis=1)
    return d <= spread * max(float(np.median(d)), 1e-6)


def fit_instance_motion(
    prev_pts: np.ndarray,
    prev_inst: np.ndarray,
    cur_pts: np.ndarray,
    cur_inst: np.ndarray,
    gap: int,
    min_points: int = 4,
    max_iter: int = 20,
) -> KeyMotion:
    """Rigid fit per instance id present on both keyframes.

    ``prev_pts`` must already be ego-compensated into current coordinates.
    The fit runs on each instance's compact cluster, ICP initialised with
    the centroid shift.
    """
    motion = KeyMotion(gap=gap)
    ids = np.intersect1d(np.unique(prev_inst[prev_inst != 0]), np.unique(cur_inst[cur_inst != 0]))
    for i in ids:
        a = prev_pts[prev_inst == i]
        b = cur_pts[cur_inst == i]
        if len(a) < min_points or len(b) < min_points:
            log.warning("instance %d has fewer than %d points; assigning zero flow", int(i), min_points)
            continue
        a, b = a[_spatial_inliers(a)], b[_spatial_inliers(b)]
        init = RigidTransform.from_translation(b.mean(axis=0) - a.mean(axis=0))
        T, _ = icp(a, b, init, max_iter=max_iter, tol=1e-6, trim=0.9)
        if np.linalg.norm(T.translation) + T.angle() < 1e-9:
            T = RigidTransform.identity()  # round-off of a static fit
        motion.transforms[int(i)] = T
    return motion


def _per_point_displacement(points, inst, motion: KeyMotion, per_frame: bool, other=None, other_inst=None, gate: Optional[float] = None) -> np.ndarray:
    """Rigid displacement of every instance point.

    With ``other`` given, a point only moves if its image under the fitted
    motion (``T`` for previous points, ``T^-1`` for current ones) lies within
    ``gate`` of a point of the same instance in ``other``; the rest are
    outliers of the fit and get zero.
    """
    out = np.zeros_like(points)
    for i in np.unique(inst):
        T = motion.transforms.get(int(i))
        if T is None:
            continue
        sel = np.flatnonzero(inst == i)
        step = motion.per_frame(i) if per_frame else T
        disp = step.apply(points[sel]) - points[sel]
        if other is not None and gate is not None:
            target = other[other_inst == i]
            probe = T.inverse().apply(points[sel]) if per_frame else T.apply(points[sel])
            dist, _ = cKDTree(target).query(probe, distance_upper_bound=gate)
            disp[~np.isfinite(dist)] = 0.0
        out[sel] = disp
    return out


def estimate_key_flow(
    prev_key,
    cur_key,
    labels,
    pose: RigidTransform,
    gap: int = 1,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    radius: Optional[float] = None,
    moving=None,
    gt_flow: Optional[np.ndarray] = None,
) -> FlowField:
    """Per-frame forward flow on the current keyframe's voxels.

    ``labels`` is ``(prev_instance, cur_instance)``.  Each instance's rigid
    motion over the gap is fitted after ego compensation and converted to a
    per-frame flow ``T^(1/k) y - y``; stuff points and fit outliers
    (farther than two voxels from their instance after motion) get zero.  Passing
    ``gt_flow`` (per-point, simulator) bypasses the estimator.  The fitted
    :class:`KeyMotion` is attached as ``field.motion``.
    """
    cur = _points(cur_key)
    prev_inst, cur_inst = (np.asarray(x) for x in labels)
    if gt_flow is not None:
        fld = FlowField.from_points(cur, gt_flow, voxel_size, radius, moving)
        fld.motion = None
        return fld
    prev = pose.apply(_points(prev_key))
    motion = fit_instance_motion(prev, prev_inst, cur, cur_inst, gap)
    gate = 2.0 * voxel_size
    vec = _per_point_displacement(cur, cur_inst, motion, True, prev, prev_inst, gate)
    fld = FlowField.from_points(cur, vec, voxel_size, radius, moving)
    fld.motion = motion
    return fld


def key_displacement_field(prev_comp, prev_inst, motion: KeyMotion, voxel_size: float, radius: Optional[float] = None, cur=None, cur_inst=None) -> FlowField:
    """Whole-gap displacement located at the ego-compensated previous keyframe (memory alignment).

    Passing the current keyframe's points and instances gates outliers of
    each instance fit to zero displacement.
    """
    prev_comp = _points(prev_comp)
    gate = None if cur is None else 2.0 * voxel_size
    disp = _per_point_displacement(prev_comp, np.asarray(prev_inst), motion, False, None if cur is None else _points(cur), cur_inst, gate)
    return FlowField.from_points(prev_comp, disp, voxel_size, radius)


# ---------------------------------------------------------------- flow memory


@dataclass
class FlowMemory:
    """Smoothed per-frame flow on the latest keyframe's voxels."""

    alpha: float = 0.7
    state: Optional[FlowField] = None
    n_updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ForecastError("alpha_f must lie in [0, 1)")


def update_flow_memory(mem: FlowMemory, key_flow: FlowField, pose: RigidTransform = RigidTransform.identity(), displacement=None) -> FlowMemory:
    """Fold a new per-frame key flow into the state.

    The old state is carried into current coordinates (ego pose, then the
    key displacement) and matched to the new voxels through ``Q``.  Voxels
    without a carried predecessor start from their observation.
    """
    if mem.state is None or len(mem.state) == 0:
        return replace(mem, state=key_flow, n_updates=mem.n_updates + 1)
    old = mem.state
    moved = pose.apply(old.centers)
    if displacement is not None:
        moved = moved + (displacement.query(moved) if hasattr(displacement, "query") else displacement)
    carried = FlowField.from_points(moved, pose.rotate(old.vectors), old.voxel_size, key_flow.radius)
    prev_vec, found = carried.lookup(key_flow.centers)
    a = mem.alpha
    vec = np.where(found[:, None], a * prev_vec + (1.0 - a) * key_flow.vectors, key_flow.vectors)
    new = replace(key_flow, vectors=vec)
    return replace(mem, state=new, n_updates=mem.n_updates + 1)


def forecast_flow(mem: FlowMemory, m: int) -> FlowField:
    """``m`` times the smoothed per-frame flow."""
    if m < 1:
        raise ForecastError("flow horizon must be at least 1")
    if mem.state is None:
        return FlowField.empty()
    return mem.state.scaled(float(m))


def smooth_sequence(values: Sequence[float], alpha: float, warm_start: bool = True) -> float:
    """Scalar form of the smoothing recurrence (reference for tests and docs)."""
    s = None
    for v in values:
        if s is None:
            s = v if warm_start else (1 - alpha) * v
        else:
            s = alpha * s + (1 - alpha) * v
    return 0.0 if s is None else s
