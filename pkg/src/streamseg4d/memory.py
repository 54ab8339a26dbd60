"""Voxel-hash geometric memory: motion alignment, gated recurrent update, queries.

Cells are stored column-wise: sorted packed voxel codes, a state matrix ``h``
and the keyframe at which each cell was last observed.  Lookups are binary
searches over the sorted codes; points that land in an empty voxel fall back
to the nearest occupied voxel centre.
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import InstanceCodebook
from .geometry import RigidTransform, SpatialIndex, pack_keys, unpack_keys, voxel_centers, voxel_keys

HIT_DIRECT = 0
HIT_FALLBACK = 1

MAX_AGE_KEYFRAMES = 100
MAX_RANGE_M = 60.0


class MemoryError_(ValueError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- GRU weights


@dataclass(frozen=True)
class GruWeights:
    """Per-voxel affine gate maps over ``[f_t ; h']`` (kernel-1 sparse convolutions)."""

    Wz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    br: np.ndarray
    Wu: np.ndarray
    bu: np.ndarray

    def __post_init__(self):
        d = len(self.bz)
        for name in ("Wz", "Wr", "Wu"):
            if getattr(self, name).shape != (d, 2 * d):
                raise MemoryError_(f"{name} must have shape ({d}, {2 * d})")
        for name in ("br", "bu"):
            if getattr(self, name).shape != (d,):
                raise MemoryError_(f"{name} must have shape ({d},)")

    @property
    def dim(self) -> int:
        return len(self.bz)

    @staticmethod
    def default(dim: int, fresh_weight: float = 0.9) -> "GruWeights":
        """Update gate fixed at ``fresh_weight``; candidate state ``tanh(f_t)``."""
        zero = np.zeros((dim, 2 * dim))
        Wu = zero.copy()
        Wu[:, :dim] = np.eye(dim)
        return GruWeights(
            Wz=zero.copy(),
            bz=np.full(dim, math.log(fresh_weight / (1.0 - fresh_weight))),
            Wr=zero.copy(),
            br=np.zeros(dim),
            Wu=Wu,
            bu=np.zeros(dim),
        )

    def encode(self, f: np.ndarray) -> np.ndarray:
        """State a voxel takes when first observed with features ``f``."""
        f = np.atleast_2d(f)
        return np.tanh(f @ self.Wu[:, : self.dim].T + self.bu)

    def step(self, f: np.ndarray, h: np.ndarray):
        """One gated update; returns ``(h_new, z, r, h_hat)``."""
        x = np.hstack([f, h])
        z = sigmoid(x @ self.Wz.T + self.bz)
        r = sigmoid(x @ self.Wr.T + self.br)
        h_hat = np.tanh(np.hstack([f, r * h]) @ self.Wu.T + self.bu)
        return h_hat * z + h * (1.0 - z), z, r, h_hat

    # file layout: b"GRUW", u32 dim, then Wz, bz, Wr, br, Wu, bu as f64 row-major
    def to_bytes(self) -> bytes:
        parts = [b"GRUW", struct.pack("<I", self.dim)]
        for a in (self.Wz, self.bz, self.Wr, self.br, self.Wu, self.bu):
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return b"".join(parts)

    @staticmethod
    def from_bytes(data: bytes) -> "GruWeights":
        if len(data) < 8 or data[:4] != b"GRUW":
            raise MemoryError_("not a GRU weight file")
        (d,) = struct.unpack("<I", data[4:8])
        need = 8 + 8 * (3 * (2 * d * d) + 3 * d)
        if len(data) != need:
            raise MemoryError_(f"GRU weight file has {len(data)} bytes, expected {need}")
        arr = np.frombuffer(data[8:], dtype="<f8")
        out, pos = [], 0
        for shape in [(d, 2 * d), (d,)] * 3:
            size = int(np.prod(shape))
            out.append(arr[pos:pos + size].reshape(shape).copy())
            pos += size
        return GruWeights(*out)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def load(path) -> "GruWeights":
        return GruWeights.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- memory


@dataclass
class VoxelMemory:
    voxel_size: float
    codes: np.ndarray  # sorted unique packed keys
    h: np.ndarray  # (n, d)
    last_observed: np.ndarray  # (n,) keyframe index
    last_keyframe_index: int = -1
    version: int = 0
    codebook: InstanceCodebook = field(default_factory=InstanceCodebook)
    _index: Optional[SpatialIndex] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.codes)

    @staticmethod
    def empty(voxel_size: float, dim: int) -> "VoxelMemory":
        return VoxelMemory(voxel_size, np.zeros(0, np.int64), np.zeros((0, dim)), np.zeros(0, np.int64))

    @property
    def dim(self) -> int:
        return self.h.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return unpack_keys(self.codes)

    @property
    def centers(self) -> np.ndarray:
        return voxel_centers(self.keys, self.voxel_size)

    @property
    def index(self) -> SpatialIndex:
        # built once; the memory is never mutated after construction
        if self._index is None:
            self._index = SpatialIndex(self.centers)
        return self._index

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Row of each packed code, or -1 when the voxel is empty."""
        codes = np.asarray(codes, dtype=np.int64)
        if len(self.codes) == 0:
            return np.full(len(codes), -1, dtype=np.int64)
        pos = np.searchsorted(self.codes, codes)
        pos_c = np.minimum(pos, len(self.codes) - 1)
        return np.where(self.codes[pos_c] == codes, pos_c, -1)

    def get(self, key) -> Optional[np.ndarray]:
        row = self.lookup(pack_keys(np.asarray(key).reshape(1, 3)))[0]
        return None if row < 0 else self.h[row]


def _reduce_cells(codes: np.ndarray, h: np.ndarray, last: np.ndarray):
    """Merge rows sharing a code: element-wise mean of h, max of last_observed."""
    uniq, inv, counts = np.unique(codes, return_inverse=True, return_counts=True)
    hs = np.zeros((len(uniq), h.shape[1]))
    np.add.at(hs, inv, h)
    hs /= counts[:, None]
    lo = np.full(len(uniq), np.iinfo(np.int64).min)
    np.maximum.at(lo, inv, last)
    return uniq, hs, lo


def voxelize_features(points: np.ndarray, features: np.ndarray, voxel_size: float):
    """Mean feature per occupied voxel: ``(sorted codes, features)``."""
    codes = pack_keys(voxel_keys(points, voxel_size))
    uniq, inv, counts = np.unique(codes, return_inverse=True, return_counts=True)
    acc = np.zeros((len(uniq), features.shape[1]))
    np.add.at(acc, inv, features)
    return uniq, acc / counts[:, None]


def _displacement(flow, positions: np.ndarray) -> np.ndarray:
    if flow is None:
        return np.zeros_like(positions)
    if isinstance(flow, np.ndarray):
        return flow
    return flow.query(positions)


def align_memory(mem: VoxelMemory, pose: RigidTransform, flow=None) -> VoxelMemory:
    """Carry the memory into the new keyframe's coordinates.

    Cell centres go through the ego transform first and then the object flow
    (a per-cell ``(n, 3)`` displacement array or any object with ``query``),
    and are re-bucketed.  Colliding cells are merged.
    """
    if len(mem) == 0:
        return replace(mem, _index=None)
    moved = pose.apply(mem.centers)
    moved = moved + _displacement(flow, moved)
    codes = pack_keys(voxel_keys(moved, mem.voxel_size))
    uniq, h, last = _reduce_cells(codes, mem.h, mem.last_observed)
    return replace(mem, codes=uniq, h=h, last_observed=last, _index=None)


def gru_update(
    aligned: VoxelMemory,
    f_codes: np.ndarray,
    f_feats: np.ndarray,
    weights: GruWeights,
    keyframe_index: int,
    max_age: int = MAX_AGE_KEYFRAMES,
    max_range: float = MAX_RANGE_M,
) -> VoxelMemory:
    """Fuse voxelized keyframe features into the aligned memory.

    Voxels in both: gated update.  Only in the frame: ``h = tanh(Psi_u(f, 0))``.
    Only in memory: unchanged.  Stale or distant cells are evicted afterwards.
    """
    f_codes = np.asarray(f_codes, dtype=np.int64)
    f_feats = np.asarray(f_feats, dtype=np.float64)
    if f_feats.shape[1] != weights.dim or (len(aligned) and aligned.dim != weights.dim):
        raise MemoryError_(f"feature dimension {f_feats.shape[1]} does not match weights ({weights.dim})")

    rows = aligned.lookup(f_codes)
    both = rows >= 0
    new_h = np.empty_like(f_feats)
    if both.any():
        new_h[both] = weights.step(f_feats[both], aligned.h[rows[both]])[0]
    if (~both).any():
        new_h[~both] = weights.encode(f_feats[~both])

    keep = np.ones(len(aligned), dtype=bool)
    keep[rows[both]] = False
    codes = np.concatenate([aligned.codes[keep], f_codes])
    h = np.concatenate([aligned.h[keep], new_h])
    last = np.concatenate([aligned.last_observed[keep], np.full(len(f_codes), keyframe_index, dtype=np.int64)])

    order = np.argsort(codes, kind="stable")
    codes, h, last = codes[order], h[order], last[order]

    alive = (keyframe_index - last) <= max_age
    centers = voxel_centers(unpack_keys(codes), aligned.voxel_size)
    alive &= np.linalg.norm(centers, axis=1) <= max_range
    return replace(
        aligned,
        codes=codes[alive],
        h=h[alive],
        last_observed=last[alive],
        last_keyframe_index=keyframe_index,
        _index=None,
    )


def memory_from_frame(points, features, voxel_size, weights: GruWeights, keyframe_index: int) -> VoxelMemory:
    codes, feats = voxelize_features(points, features, voxel_size)
    return gru_update(VoxelMemory.empty(voxel_size, weights.dim), codes, feats, weights, keyframe_index)


def query(mem: VoxelMemory, points: np.ndarray):
    """Features for each point: direct voxel hit, else nearest occupied voxel centre."""
    if len(mem) == 0:
        raise MemoryError_("query against an empty memory")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rows = mem.lookup(pack_keys(voxel_keys(points, mem.voxel_size)))
    kind = np.where(rows >= 0, HIT_DIRECT, HIT_FALLBACK).astype(np.int8)
    miss = rows < 0
    if miss.any():
        nn, _ = mem.index.nn_query(points[miss])
        rows = rows.copy()
        rows[miss] = nn
    return mem.h[rows], kind


# ---------------------------------------------------------------- snapshots


@dataclass(frozen=True)
class Snapshot:
    """Immutable bundle handed from the predictive to the inference context."""

    version: int
    keyframe_index: int
    memory: VoxelMemory
    codebook: InstanceCodebook
    publish_time: float = 0.0
    payload: dict = field(default_factory=dict)


class SnapshotStore:
    """Single-writer publication point.

    ``publish`` builds the new snapshot completely and then swaps one
    reference; readers only ever dereference that reference, so they never
    block the writer and never observe a partially built snapshot.
    """

    def __init__(self):
        self._latest: Optional[Snapshot] = None
        self._history = []
        self._write_guard = threading.Lock()  # guards against a second writer, not readers

    @property
    def version(self) -> int:
        s = self._latest
        return 0 if s is None else s.version

    def latest(self) -> Optional[Snapshot]:
        return self._latest

    def publish(self, memory: VoxelMemory, keyframe_index: int, codebook=None, publish_time: float = 0.0, **payload) -> Snapshot:
        if not self._write_guard.acquire(blocking=False):
            raise RuntimeError("concurrent writers on a single-writer snapshot store")
        try:
            version = self.version + 1
            mem = replace(memory, version=version)
            if len(mem):
                _ = mem.index  # companion index built before publication
            snap = Snapshot(
                version=version,
                keyframe_index=keyframe_index,
                memory=mem,
                codebook=codebook if codebook is not None else mem.codebook,
                publish_time=publish_time,
                payload=dict(payload),
            )
            self._history.append(snap)
            self._latest = snap
            return snap
        finally:
            self._write_guard.release()

    def latest_before(self, t: float) -> Optional[Snapshot]:
        """Newest snapshot whose publish time is at or before ``t``."""
        best = None
        for s in list(self._history):
            if s.publish_time <= t + 1e-12:
                best = s
            else:
                break
        return best


def publish_snapshot(store: SnapshotStore, mem: VoxelMemory, keyframe_index: Optional[int] = None, **kw) -> Snapshot:
    return store.publish(mem, mem.last_keyframe_index if keyframe_index is None else keyframe_index, **kw)


def stress_snapshots(n_queries: int = 10**6, batch: int = 16, n_cells: int = 64, seed: int = 0) -> dict:
    """Query snapshots while a writer thread keeps publishing new ones.

    Every cell of version ``v`` holds the value ``v`` and the version has
    ``n_cells + v % 7`` cells, so a read mixing two versions shows up either
    as foreign values or as a length mismatch.  Each read dereferences the
    store once and answers ``batch`` point queries.
    """
    rng = np.random.default_rng(seed)
    store = SnapshotStore()
    size = 0.2
    side = int(math.ceil((n_cells + 7) ** (1 / 3)))
    grid = np.stack(np.unravel_index(np.arange(side**3), (side, side, side)), axis=1)
    stop = threading.Event()

    def build(v: int) -> VoxelMemory:
        k = n_cells + v % 7
        codes = np.sort(pack_keys(grid[:k]))
        return VoxelMemory(size, codes, np.full((k, 1), float(v)), np.full(k, v, dtype=np.int64))

    def writer():
        while not stop.is_set():
            store.publish(build(store.version + 1), store.version + 1)

    store.publish(build(1), 1)
    th = threading.Thread(target=writer, daemon=True)
    th.start()
    pts = rng.uniform(-0.1, side * size + 0.1, (4096, 3))
    torn = reads = done = 0
    seen = set()
    try:
        while done < n_queries:
            snap = store.latest()
            mem = snap.memory
            j = (reads * batch) % (len(pts) - batch)
            feats, _ = query(mem, pts[j:j + batch])
            v = snap.version
            ok = (
                mem.version == v
                and len(mem.h) == len(mem.codes) == len(mem.index) == n_cells + v % 7
                and bool(np.all(feats == v))
            )
            torn += not ok
            seen.add(v)
            reads += 1
            done += batch
    finally:
        stop.set()
        th.join()
    return {"n_queries": done, "n_reads": reads, "n_publishes": store.version, "torn": torn, "versions_seen": len(seen)}
