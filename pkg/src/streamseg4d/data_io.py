"""Readers and writers for SemanticKITTI scans/labels and the native sequence format.

SemanticKITTI
    ``NNNNNN.bin``: float32 little-endian ``x, y, z, intensity`` records.
    ``NNNNNN.label``: uint32 little-endian, low 16 bits semantic, high 16 instance.
    ``poses.txt``: one row-major 3x4 ``world_from_sensor`` matrix per line.

Native sequence (all little-endian)::

    magic  b"S4DS"            4 bytes
    version u16               currently 1
    fps f64, n_frames u32
    class table: u32 length + UTF-8 JSON
    n_frames x frame block:   u32 payload length + payload
        frame_index u32, timestamp f64, n u32, pose 12 x f64 (3x4 row-major)
        points n*3 f64, semantic n i32, instance n i32, moving n u8,
        flow n*3 f64, point_ids n i64

Every parser raises :class:`FormatError` (never anything else) on bad input.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Tuple

import numpy as np
import yaml

from .geometry import GeometryError, PointCloud, RigidTransform
from .scene import ClassTable, FrameSample, SceneSequence

MAGIC = b"S4DS"
VERSION = 1


class FormatError(ValueError):
    """Malformed input; ``field`` names what was being parsed, ``offset`` where."""

    def __init__(self, message: str, field: str = "", offset: int = -1):
        where = f" (field {field!r}" + (f", offset {offset})" if offset >= 0 else ")") if field else ""
        super().__init__(message + where)
        self.field = field
        self.offset = offset


# ---------------------------------------------------------------- KITTI


def read_kitti_scan(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise FormatError(
            f"scan length {len(data)} is not a multiple of 16", field="scan", offset=len(data) - len(data) % 16
        )
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(rec).all(axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise FormatError(f"non-finite value in point {i}", field="scan", offset=16 * i)
    return PointCloud(points=rec[:, :3].astype(np.float64), intensity=rec[:, 3].copy())


def write_kitti_scan(pc: PointCloud) -> bytes:
    n = len(pc)
    rec = np.empty((n, 4), dtype="<f4")
    rec[:, :3] = pc.points
    rec[:, 3] = 0.0 if pc.intensity is None else pc.intensity
    return rec.tobytes()


def read_kitti_label(data: bytes) -> Tuple[np.ndarray, np.ndarray]:
    if len(data) % 4:
        raise FormatError(
            f"label length {len(data)} is not a multiple of 4", field="label", offset=len(data) - len(data) % 4
        )
    words = np.frombuffer(data, dtype="<u4")
    return (words & 0xFFFF).astype(np.int32), (words >> 16).astype(np.int32)


def write_kitti_label(semantic, instance) -> bytes:
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if semantic.shape != instance.shape:
        raise FormatError("semantic and instance arrays differ in length", field="label")
    if semantic.size and (semantic.min() < 0 or semantic.max() > 0xFFFF or instance.min() < 0 or instance.max() > 0xFFFF):
        raise FormatError("label values must fit in 16 bits", field="label")
    return ((instance << 16) | semantic).astype("<u4").tobytes()


def _as_rotation(M: np.ndarray) -> np.ndarray:
    R = M[:, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-12:
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    return R


def read_poses(text) -> List[RigidTransform]:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError("pose file is not ASCII text", field="poses", offset=exc.start) from None
    poses = []
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            vals = np.array([float(x) for x in line.split()], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"pose line {lineno}: {exc}", field="poses") from None
        if vals.size != 12 or not np.all(np.isfinite(vals)):
            raise FormatError(f"pose line {lineno} must hold 12 finite numbers", field="poses")
        M = vals.reshape(3, 4)
        try:
            poses.append(RigidTransform(_as_rotation(M), M[:, 3]))
        except GeometryError as exc:
            raise FormatError(f"pose line {lineno}: {exc}", field="poses") from None
    return poses


def write_poses(poses) -> str:
    lines = []
    for p in poses:
        M = p.matrix()[:3].reshape(-1)
        lines.append(" ".join(repr(float(x)) for x in M))
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class KittiFrame:
    scan: PointCloud
    semantic: np.ndarray
    instance: np.ndarray


def write_kitti_dir(frames: List[KittiFrame], poses: List[RigidTransform], root) -> None:
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        (root / "velodyne" / f"{i:06d}.bin").write_bytes(write_kitti_scan(fr.scan))
        (root / "labels" / f"{i:06d}.label").write_bytes(write_kitti_label(fr.semantic, fr.instance))
    (root / "poses.txt").write_text(write_poses(poses))


def read_kitti_dir(root) -> Tuple[List[KittiFrame], List[RigidTransform]]:
    """Read ``velodyne/*.bin`` (or ``*.bin`` at top level) with matching labels and poses."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root} is not a directory", field="path")
    scan_dir = root / "velodyne" if (root / "velodyne").is_dir() else root
    label_dir = root / "labels" if (root / "labels").is_dir() else root
    frames = []
    for bin_path in sorted(scan_dir.glob("*.bin")):
        try:
            scan = read_kitti_scan(bin_path.read_bytes())
        except FormatError as exc:
            raise FormatError(f"{bin_path.name}: {exc}", field=exc.field, offset=exc.offset) from None
        label_path = label_dir / (bin_path.stem + ".label")
        if label_path.exists():
            sem, inst = read_kitti_label(label_path.read_bytes())
            if len(sem) != len(scan):
                raise FormatError(f"{label_path.name}: {len(sem)} labels for {len(scan)} points", field="label")
        else:
            sem = np.zeros(len(scan), dtype=np.int32)
            inst = np.zeros(len(scan), dtype=np.int32)
        frames.append(KittiFrame(scan, sem, inst))
    pose_path = root / "poses.txt"
    poses = read_poses(pose_path.read_bytes()) if pose_path.exists() else []
    if poses and len(poses) < len(frames):
        raise FormatError(f"{len(poses)} poses for {len(frames)} scans", field="poses")
    return frames, poses


# ---------------------------------------------------------------- class extension


def load_kitti_table(path=None):
    """Return ``(ClassTable, learning_map)`` for the 25-class moving extension."""
    if path is None:
        text = resources.files("streamseg4d.data").joinpath("semantickitti_extended.yaml").read_text()
    else:
        text = Path(path).read_text()
    cfg = yaml.safe_load(text)
    n = max(cfg["names"]) + 1
    names = [cfg["names"].get(i, f"class-{i}") for i in range(n)]
    things = set(cfg["things"])
    moving = set(cfg["moving"])
    table = ClassTable(
        names=tuple(names),
        thing=tuple(i in things for i in range(n)),
        moving=tuple(i in moving for i in range(n)),
        moving_variant={int(k): int(v) for k, v in cfg["moving_variant"].items()},
    )
    return table, {int(k): int(v) for k, v in cfg["learning_map"].items()}


def map_raw_labels(raw_semantic: np.ndarray, learning_map: dict) -> np.ndarray:
    lut = np.zeros(max(max(learning_map), int(np.max(raw_semantic, initial=0))) + 1, dtype=np.int32)
    for k, v in learning_map.items():
        lut[k] = v
    return lut[np.asarray(raw_semantic, dtype=np.int64)]


def extend_class(class_id: np.ndarray, moving: np.ndarray, table: ClassTable) -> np.ndarray:
    """Replace a static class by its moving variant wherever ``moving`` is set."""
    out = np.asarray(class_id, dtype=np.int32).copy()
    moving = np.asarray(moving, dtype=bool)
    for static_id, moving_id in table.moving_variant.items():
        out[(out == static_id) & moving] = moving_id
    return out


def kitti_to_sequence(frames: List[KittiFrame], poses, fps: float = 10.0, table=None, learning_map=None) -> SceneSequence:
    """Convert raw KITTI frames into a sequence over the extended class table."""
    if table is None:
        table, learning_map = load_kitti_table()
    is_thing = np.asarray(table.thing, dtype=bool)
    is_moving = np.asarray(table.moving, dtype=bool)
    seq_frames = []
    for i, fr in enumerate(frames):
        sem = map_raw_labels(fr.semantic, learning_map)
        n = len(fr.scan)
        seq_frames.append(
            FrameSample(
                frame_index=i,
                timestamp=i / fps,
                points=np.array(fr.scan.points),
                semantic=sem,
                instance=np.where(is_thing[sem], fr.instance, 0).astype(np.int32),
                moving=is_moving[sem],
                pose=poses[i] if poses else RigidTransform.identity(),
                flow=np.zeros((n, 3)),
                point_ids=np.arange(n, dtype=np.int64),
            )
        )
    return SceneSequence(frames=seq_frames, fps=fps, classes=table)


def raw_label_lut(classes: ClassTable, table=None, learning_map=None) -> np.ndarray:
    """Map class ids of ``classes`` to raw KITTI labels by class name.

    The smallest raw label that learns to the same-named extended class is used,
    so ``map_raw_labels`` inverts it exactly.
    """
    if table is None:
        table, learning_map = load_kitti_table()
    by_name = {name: i for i, name in enumerate(table.names)}
    lut = np.zeros(len(classes.names), dtype=np.int32)
    for cid, name in enumerate(classes.names):
        if cid == 0:
            continue
        if name not in by_name:
            raise FormatError(f"class {name!r} has no KITTI counterpart", field="semantic")
        raws = sorted(r for r, v in learning_map.items() if v == by_name[name])
        if not raws:
            raise FormatError(f"class {name!r} has no raw KITTI label", field="semantic")
        lut[cid] = raws[0]
    return lut


def sequence_to_kitti(seq: SceneSequence) -> Tuple[List[KittiFrame], List[RigidTransform]]:
    """Export a sequence as raw KITTI frames; labels go through ``raw_label_lut``."""
    lut = raw_label_lut(seq.classes)
    frames = [
        KittiFrame(PointCloud(points=f.points.astype(np.float32).astype(np.float64)), lut[f.semantic], f.instance)
        for f in seq.frames
    ]
    return frames, [f.pose for f in seq.frames]


# ---------------------------------------------------------------- native format


class _Reader:
    def __init__(self, data: bytes, base: int = 0):
        self.data = data
        self.pos = 0
        self.base = base

    def take(self, n: int, field: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated input: need {n} bytes", field=field, offset=self.base + self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field))

    def array(self, dtype: str, count: int, field: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, field), dtype=dt).copy()


def _frame_payload(f: FrameSample) -> bytes:
    n = len(f.points)
    buf = io.BytesIO()
    buf.write(struct.pack("<IdI", f.frame_index, f.timestamp, n))
    buf.write(np.ascontiguousarray(f.pose.matrix()[:3], dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(f.points, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(f.semantic, dtype="<i4").tobytes())
    buf.write(np.ascontiguousarray(f.instance, dtype="<i4").tobytes())
    buf.write(np.ascontiguousarray(f.moving, dtype="u1").tobytes())
    buf.write(np.ascontiguousarray(f.flow, dtype="<f8").reshape(-1).tobytes())
    buf.write(np.ascontiguousarray(f.point_ids, dtype="<i8").tobytes())
    return buf.getvalue()


def write_native(seq: SceneSequence) -> bytes:
    table = json.dumps(seq.classes.to_dict(), sort_keys=True).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HdI", VERSION, float(seq.fps), len(seq.frames)))
    out.write(struct.pack("<I", len(table)))
    out.write(table)
    for f in seq.frames:
        payload = _frame_payload(f)
        out.write(struct.pack("<I", len(payload)))
        out.write(payload)
    return out.getvalue()


def _read_frame(payload: bytes, base: int, k: int) -> FrameSample:
    r = _Reader(payload, base)
    tag = f"frame[{k}]"
    idx, ts, n = r.unpack("<IdI", f"{tag}.header")
    expected = 4 + 8 + 4 + 96 + n * (24 + 4 + 4 + 1 + 24 + 8)
    if expected != len(payload):
        raise FormatError(f"block length {len(payload)} does not match {n} points", field=f"{tag}.n_points", offset=base)
    M = r.array("<f8", 12, f"{tag}.pose").reshape(3, 4)
    try:
        pose = RigidTransform(M[:, :3], M[:, 3])
    except GeometryError as exc:
        raise FormatError(str(exc), field=f"{tag}.pose", offset=base) from None
    points = r.array("<f8", 3 * n, f"{tag}.points").reshape(n, 3)
    semantic = r.array("<i4", n, f"{tag}.semantic")
    instance = r.array("<i4", n, f"{tag}.instance")
    moving = r.array("u1", n, f"{tag}.moving")
    if moving.size and moving.max() > 1:
        raise FormatError("moving flags must be 0 or 1", field=f"{tag}.moving", offset=base)
    flow = r.array("<f8", 3 * n, f"{tag}.flow").reshape(n, 3)
    point_ids = r.array("<i8", n, f"{tag}.point_ids")
    return FrameSample(
        frame_index=int(idx),
        timestamp=float(ts),
        points=points,
        semantic=semantic.astype(np.int32),
        instance=instance.astype(np.int32),
        moving=moving.astype(bool),
        pose=pose,
        flow=flow,
        point_ids=point_ids,
    )


def read_native(data: bytes) -> SceneSequence:
    r = _Reader(bytes(data))
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", field="magic", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", field="version", offset=4)
    (fps,) = r.unpack("<d", "fps")
    if not np.isfinite(fps) or fps <= 0:
        raise FormatError(f"invalid fps {fps}", field="fps", offset=6)
    (n_frames,) = r.unpack("<I", "n_frames")
    (tlen,) = r.unpack("<I", "class_table.length")
    raw = r.take(tlen, "class_table")
    try:
        classes = ClassTable.from_dict(json.loads(raw.decode("utf-8")))
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"unreadable class table: {exc}", field="class_table", offset=22) from None
    frames = []
    for k in range(n_frames):
        (blen,) = r.unpack("<I", f"frame[{k}].length")
        base = r.pos
        payload = r.take(blen, f"frame[{k}]")
        frames.append(_read_frame(payload, base, k))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last frame", field="trailer", offset=r.pos)
    return SceneSequence(frames=frames, fps=float(fps), classes=classes)


def save_native(seq: SceneSequence, path) -> None:
    Path(path).write_bytes(write_native(seq))


def load_native(path) -> SceneSequence:
    return read_native(Path(path).read_bytes())
