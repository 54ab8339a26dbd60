"""SE(3) algebra, point containers, voxel keys and nearest-neighbour indexing.

Conventions: rotations are 3x3 float64 matrices, points are ``(n, 3)`` float64
arrays, and ``compose(a, b)`` applies ``b`` first.  Every object here is treated
as immutable once constructed (arrays are flagged read-only).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_VOXEL_SIZE = 0.2

# 21 bits per axis, offset so negative indices pack into a non-negative int64
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


class GeometryError(ValueError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def skew(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-8:
        # second-order Taylor; error O(theta^3)
        return np.eye(3) + K + 0.5 * K @ K
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + A * K + B * K @ K


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3) or not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("rotation must be a finite 3x3 matrix and translation a finite 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_translation(t) -> "RigidTransform":
        return RigidTransform(np.eye(3), t)

    @staticmethod
    def from_matrix(M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return RigidTransform(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return math.acos(min(1.0, max(-1.0, c)))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` and then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class TwistVector:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen(np.asarray(self.omega, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "v", _frozen(np.asarray(self.v, dtype=np.float64).reshape(3)))

    @staticmethod
    def zero() -> "TwistVector":
        return TwistVector(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_array(a) -> "TwistVector":
        a = np.asarray(a, dtype=np.float64)
        return TwistVector(a[:3], a[3:6])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    def scaled(self, s: float) -> "TwistVector":
        return TwistVector(self.omega * s, self.v * s)

    def __add__(self, other: "TwistVector") -> "TwistVector":
        return TwistVector(self.omega + other.omega, self.v + other.v)


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * K @ K
    )


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


def se3_exp(xi: TwistVector) -> RigidTransform:
    R = rodrigues(xi.omega)
    return RigidTransform(R, _left_jacobian(xi.omega) @ xi.v)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(w))  # sin(theta)
    c = (np.trace(R) - 1.0) / 2.0
    theta = math.atan2(s, c)
    if theta < 1e-8:
        return w  # first order, R ~ I + [w]x
    if theta < math.pi / 2:
        return w * (theta / s)
    # large angles: axis from the symmetric part is better conditioned
    S = (R + R.T) / 2.0 - c * np.eye(3)
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / math.sqrt(max(S[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, w) < 0:
        axis = -axis
    return axis * theta


def se3_log(T: RigidTransform) -> TwistVector:
    """Inverse of :func:`se3_exp`; rejects rotations of angle pi or more."""
    if T.angle() >= math.pi - 1e-9:
        raise GeometryError("se3_log undefined for rotation angle >= pi")
    omega = so3_log(T.rotation)
    return TwistVector(omega, _left_jacobian_inv(omega) @ T.translation)


def interpolate(T: RigidTransform, s: float) -> RigidTransform:
    """``T**s`` along the one-parameter subgroup through T."""
    return se3_exp(se3_log(T).scaled(s))


# ---------------------------------------------------------------- point cloud


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity)
            if len(inten) != n:
                raise GeometryError(f"intensity has {len(inten)} entries for {n} points")
            object.__setattr__(self, "intensity", _frozen(inten, dtype=inten.dtype))
        for name, arr in self.attributes.items():
            if len(arr) != n:
                raise GeometryError(f"attribute {name!r} has {len(arr)} entries for {n} points")

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------- voxels


def voxel_keys(points: np.ndarray, voxel_size: float = DEFAULT_VOXEL_SIZE) -> np.ndarray:
    """Integer voxel indices ``floor(p / voxel_size)`` as an ``(n, 3)`` int64 array."""
    if not voxel_size > 0:
        raise GeometryError("voxel_size must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise GeometryError("non-finite point coordinates")
    return np.floor(points / voxel_size).astype(np.int64)


def voxel_centers(keys: np.ndarray, voxel_size: float) -> np.ndarray:
    return (np.asarray(keys, dtype=np.float64) + 0.5) * voxel_size


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack ``(n, 3)`` voxel indices into sortable int64 codes."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    shifted = keys + _KEY_OFFSET
    if np.any(shifted < 0) or np.any(shifted > _KEY_MASK):
        raise GeometryError("voxel index outside the packable range")
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


def unpack_keys(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.empty((len(codes), 3), dtype=np.int64)
    out[:, 0] = (codes >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (codes >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = codes & _KEY_MASK
    return out - _KEY_OFFSET


def voxelize(points, voxel_size: float = DEFAULT_VOXEL_SIZE) -> Dict[Tuple[int, int, int], np.ndarray]:
    """Map each occupied voxel key to the indices of the points inside it."""
    if isinstance(points, PointCloud):
        points = points.points
    keys = voxel_keys(points, voxel_size)
    if len(keys) == 0:
        return {}
    codes = pack_keys(keys)
    order = np.argsort(codes, kind="stable")
    uniq, starts = np.unique(codes[order], return_index=True)
    bounds = np.append(starts, len(order))
    ukeys = unpack_keys(uniq)
    return {
        tuple(int(c) for c in ukeys[j]): order[bounds[j]:bounds[j + 1]]
        for j in range(len(uniq))
    }


def group_by_voxel(points: np.ndarray, voxel_size: float):
    """Vectorised voxelization: ``(sorted unique codes, inverse index per point)``."""
    codes = pack_keys(voxel_keys(points, voxel_size))
    return np.unique(codes, return_inverse=True)


# ---------------------------------------------------------------- spatial index


class SpatialIndex:
    """Exact nearest-neighbour index over a fixed point set (k-d tree)."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise GeometryError("cannot index an empty point set")
        self.points = _frozen(pts)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def nn_query(self, q, max_distance: float = np.inf):
        """Nearest stored point for one query (``(index, distance)``) or a batch.

        For batches, queries with no neighbour within ``max_distance`` get
        index ``-1`` and distance ``inf``.
        """
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        dist, idx = self._tree.query(q.reshape(-1, 3), k=1, distance_upper_bound=max_distance)
        idx = np.where(np.isfinite(dist), idx, -1)
        if single:
            return int(idx[0]), float(dist[0])
        return idx, dist

    def ball_query(self, q: np.ndarray, radius: float):
        return self._tree.query_ball_point(np.asarray(q, dtype=np.float64).reshape(-1, 3), r=radius)


def build_spatial_index(points) -> SpatialIndex:
    if isinstance(points, PointCloud):
        points = points.points
    return SpatialIndex(points)


def nn_query(index: SpatialIndex, q):
    return index.nn_query(q)


def brute_force_nn(points: np.ndarray, q: np.ndarray):
    """O(n) reference scan, used as an oracle in tests."""
    d = np.linalg.norm(np.asarray(points) - np.asarray(q), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def kabsch(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)
