"""Synthetic dynamic scenes with exact rigid-body ground truth.

World frame is z-up with the ground plane at z = 0.  Each body follows the
per-frame rigid map ``x -> c + exp(xi) (x - c)`` about its rotation centre
``c``; the ego follows ``T_world_from_ego(t) = exp(t * xi_ego)``.

Frame convention: a frame's points, flows and labels are expressed in that
frame's own ego coordinates.  Flows only carry object motion; ego motion is
handled separately through :func:`gt_relative_pose`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml

from .geometry import RigidTransform, TwistVector, compose, se3_exp

# segment clearance so that no voxel of side 0.2 m can hold two segments
DEFAULT_CLEARANCE = 0.4


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ClassTable:
    """Extended class table; id 0 is the ignore class."""

    names: Sequence[str]
    thing: Sequence[bool]
    moving: Sequence[bool]
    moving_variant: dict = field(default_factory=dict)  # static class id -> moving class id

    def __post_init__(self):
        if not (len(self.names) == len(self.thing) == len(self.moving)):
            raise SceneError("class table columns differ in length")

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def thing_ids(self) -> List[int]:
        return [i for i in range(1, self.n_classes) if self.thing[i]]

    def stuff_ids(self) -> List[int]:
        return [i for i in range(1, self.n_classes) if not self.thing[i]]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "thing": [bool(x) for x in self.thing],
            "moving": [bool(x) for x in self.moving],
            "moving_variant": {int(k): int(v) for k, v in self.moving_variant.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassTable":
        return ClassTable(
            names=tuple(d["names"]),
            thing=tuple(bool(x) for x in d["thing"]),
            moving=tuple(bool(x) for x in d["moving"]),
            moving_variant={int(k): int(v) for k, v in d.get("moving_variant", {}).items()},
        )


SIM_CLASSES = ClassTable(
    names=("unlabeled", "road", "building", "pole", "car", "person", "moving-car", "moving-person"),
    thing=(False, False, False, False, True, True, True, True),
    moving=(False, False, False, False, False, False, True, True),
    moving_variant={4: 6, 5: 7},
)
ROAD, BUILDING, POLE, CAR, PERSON = 1, 2, 3, 4, 5

# kind -> (shape, extent, points, class)
BODY_TEMPLATES = {
    "car": ("box", (4.0, 1.8, 1.5), 600, CAR),
    "person": ("cylinder", (0.3, 1.7), 200, PERSON),
    "building": ("box", (4.0, 4.0, 3.0), 800, BUILDING),
    "pole": ("cylinder", (0.15, 3.0), 100, POLE),
}


@dataclass
class BodySpec:
    """Explicit body placement (used by reference scenes and config files).

    Velocities are per frame.  ``rot_center`` defaults to the body centre.
    """

    kind: str
    center: Sequence[float]
    v: Sequence[float] = (0.0, 0.0, 0.0)
    omega: Sequence[float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    rot_center: Optional[Sequence[float]] = None
    n_points: Optional[int] = None

    @staticmethod
    def from_dict(d: dict) -> "BodySpec":
        return BodySpec(**d)


@dataclass
class SceneConfig:
    """Scene generation parameters; all velocities are per frame."""

    n_bodies: int = 6
    n_static_background_points: int = 6000
    n_clutter: int = 6
    ego_omega: Sequence[float] = (0.0, 0.0, 0.0)
    ego_v: Sequence[float] = (0.0, 0.0, 0.0)
    fps: float = 10.0
    n_frames: int = 20
    seed: int = 0
    moving_fraction: float = 0.6
    person_fraction: float = 0.4
    speed_range: Sequence[float] = (0.1, 0.8)
    omega_scale: float = 0.03
    area_half_extent: float = 25.0
    clearance: float = DEFAULT_CLEARANCE
    range_cutoff: Optional[float] = None
    dropout: float = 0.0
    bodies: Optional[List[BodySpec]] = None
    clutter: Optional[List[BodySpec]] = None
    classes: ClassTable = SIM_CLASSES

    def __post_init__(self):
        if not self.fps > 0:
            raise SceneError("fps must be positive")
        if self.n_frames < 1:
            raise SceneError("n_frames must be at least 1")
        n_b = len(self.bodies) if self.bodies is not None else self.n_bodies
        if n_b == 0 and self.n_static_background_points == 0:
            raise SceneError("scene has neither bodies nor background points")
        if not 0.0 <= self.dropout < 1.0:
            raise SceneError("dropout must lie in [0, 1)")

    def at_fps(self, fps: float) -> "SceneConfig":
        """Same physical scene sampled at a different frame rate."""
        s = self.fps / fps

        def sc(vals):
            return tuple(float(x) * s for x in vals)

        bodies = None
        if self.bodies is not None:
            bodies = [replace(b, v=sc(b.v), omega=sc(b.omega)) for b in self.bodies]
        return replace(
            self,
            fps=fps,
            n_frames=max(1, int(round(self.n_frames / s))),
            ego_omega=sc(self.ego_omega),
            ego_v=sc(self.ego_v),
            speed_range=sc(self.speed_range),
            omega_scale=self.omega_scale * s,
            bodies=bodies,
        )

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        d = dict(d)
        known = set(SceneConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene config keys: {sorted(unknown)}")
        for key in ("bodies", "clutter"):
            if d.get(key) is not None:
                d[key] = [BodySpec.from_dict(b) for b in d[key]]
        if "classes" in d:
            d["classes"] = ClassTable.from_dict(d["classes"])
        for key in ("ego_omega", "ego_v", "speed_range"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return SceneConfig(**d)


def load_scene_config(path) -> SceneConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return SceneConfig.from_dict(data.get("scene", data))


@dataclass
class RigidBody:
    id: int
    class_id: int
    kind: str
    local_points: np.ndarray  # offsets from the rotation centre at t = 0
    rot_center: np.ndarray
    twist: TwistVector
    moving: bool

    def step(self) -> RigidTransform:
        """World-frame per-frame motion: rotation about ``rot_center`` plus translation."""
        c = RigidTransform.from_translation(self.rot_center)
        return compose(c, compose(se3_exp(self.twist), c.inverse()))

    def pose(self, t: float) -> RigidTransform:
        c = RigidTransform.from_translation(self.rot_center)
        return compose(c, compose(se3_exp(self.twist.scaled(t)), c.inverse()))

    def world_points(self, t: float) -> np.ndarray:
        return self.pose(t).apply(self.local_points + self.rot_center)


@dataclass
class FrameSample:
    frame_index: int
    timestamp: float
    points: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    moving: np.ndarray
    pose: RigidTransform  # world_from_ego
    flow: np.ndarray  # object motion to the next frame, ego coordinates
    point_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SceneSequence:
    frames: List[FrameSample]
    fps: float
    classes: ClassTable = SIM_CLASSES
    bodies: List[RigidBody] = field(default_factory=list)
    background: Optional[np.ndarray] = None
    background_labels: Optional[np.ndarray] = None
    ego_twist: TwistVector = field(default_factory=TwistVector.zero)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> FrameSample:
        return self.frames[i]

    @property
    def n_frames(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------- sampling


def _sample_box(rng, extent, n):
    ex = np.asarray(extent, dtype=np.float64)
    areas = np.array([ex[1] * ex[2], ex[1] * ex[2], ex[0] * ex[2], ex[0] * ex[2], ex[0] * ex[1], ex[0] * ex[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * ex
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign * ex[axis]
    return pts


def _sample_cylinder(rng, extent, n):
    r, h = extent
    side_area = 2 * math.pi * r * h
    cap_area = 2 * math.pi * r * r
    on_side = rng.random(n) < side_area / (side_area + cap_area)
    ang = rng.random(n) * 2 * math.pi
    rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, (rng.random(n) - 0.5) * h, np.where(rng.random(n) < 0.5, -h / 2, h / 2))
    return np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)


def _footprint_radius(kind: str) -> float:
    shape, ext, _, _ = BODY_TEMPLATES[kind]
    if shape == "box":
        return 0.5 * math.hypot(ext[0], ext[1])
    return ext[0]


def _half_height(kind: str) -> float:
    shape, ext, _, _ = BODY_TEMPLATES[kind]
    return ext[2] / 2 if shape == "box" else ext[1] / 2


def _make_body(rng, body_id, spec: BodySpec, classes: ClassTable, clearance: float) -> RigidBody:
    if spec.kind not in BODY_TEMPLATES:
        raise SceneError(f"unknown body kind {spec.kind!r}")
    shape, extent, n_default, cls = BODY_TEMPLATES[spec.kind]
    n = spec.n_points or n_default
    local = _sample_box(rng, extent, n) if shape == "box" else _sample_cylinder(rng, extent, n)
    c, s = math.cos(spec.yaw), math.sin(spec.yaw)
    local = local @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]).T
    center = np.array(spec.center, dtype=np.float64)
    if len(center) == 2:
        # rest on the ground plane with the clearance gap underneath
        center = np.array([center[0], center[1], _half_height(spec.kind) + clearance])
    rot_center = center if spec.rot_center is None else np.array(spec.rot_center, dtype=np.float64)
    if len(rot_center) == 2:
        rot_center = np.array([rot_center[0], rot_center[1], center[2]])
    twist = TwistVector(spec.omega, spec.v)
    if np.linalg.norm(twist.omega) > 1.0:
        raise SceneError("body angular speed above 1 rad/frame breaks the contraction premise")
    moving = bool(np.linalg.norm(twist.omega) > 0 or np.linalg.norm(twist.v) > 0)
    if moving and cls in classes.moving_variant:
        cls = classes.moving_variant[cls]
    return RigidBody(
        id=body_id,
        class_id=cls,
        kind=spec.kind,
        local_points=local + center - rot_center,
        rot_center=rot_center,
        twist=twist,
        moving=moving,
    )


def _centre_track(body: RigidBody, n_frames: int) -> np.ndarray:
    c0 = body.local_points.mean(axis=0) + body.rot_center
    return np.array([body.pose(t).apply(c0) for t in range(n_frames)])


def _random_body_spec(rng, cfg: SceneConfig) -> BodySpec:
    kind = "person" if rng.random() < cfg.person_fraction else "car"
    A = cfg.area_half_extent
    center = (rng.uniform(-A, A), rng.uniform(-A, A))
    yaw = rng.uniform(-math.pi, math.pi)
    if rng.random() < cfg.moving_fraction:
        lo, hi = cfg.speed_range
        speed = rng.uniform(lo, hi) * (0.3 if kind == "person" else 1.0)
        heading = yaw if kind == "car" else rng.uniform(-math.pi, math.pi)
        w = float(np.clip(rng.normal(0.0, cfg.omega_scale), -1.0, 1.0))
        # v is the world velocity of the rotation centre at t = 0
        return BodySpec(kind=kind, center=center, v=_rotate_z((speed, 0.0, 0.0), heading), omega=(0, 0, w), yaw=yaw)
    return BodySpec(kind=kind, center=center, yaw=yaw)


def _rotate_z(vec, ang):
    c, s = math.cos(ang), math.sin(ang)
    return (c * vec[0] - s * vec[1], s * vec[0] + c * vec[1], vec[2])


def _separated(track_a, ra, track_b, rb, clearance) -> bool:
    d = np.linalg.norm(track_a[:, :2] - track_b[:, :2], axis=1)
    return bool(np.all(d >= ra + rb + clearance))


def _place(rng, specs_fn, cfg, placed, body_id, tries=200):
    for _ in range(tries):
        spec = specs_fn()
        body = _make_body(rng, body_id, spec, cfg.classes, cfg.clearance)
        track = _centre_track(body, cfg.n_frames)
        r = _footprint_radius(spec.kind)
        if all(_separated(track, r, t2, r2, cfg.clearance) for _, t2, r2 in placed):
            return body, track, r
    raise SceneError("could not place body with the requested clearance; enlarge area_half_extent")


def _ego_poses(cfg: SceneConfig) -> List[RigidTransform]:
    xi = TwistVector(cfg.ego_omega, cfg.ego_v)
    return [se3_exp(xi.scaled(t)) for t in range(cfg.n_frames + 1)]


def generate_scene(cfg: SceneConfig) -> SceneSequence:
    """Generate ``cfg.n_frames`` frames; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    classes = cfg.classes
    placed = []  # (body, track, radius)
    next_id = 1

    for spec in cfg.clutter or []:
        body = _make_body(rng, 0, spec, classes, cfg.clearance)
        placed.append((body, _centre_track(body, cfg.n_frames), _footprint_radius(spec.kind)))
    if cfg.clutter is None:
        A = cfg.area_half_extent
        for _ in range(cfg.n_clutter):
            def clutter_spec():
                kind = "building" if rng.random() < 0.5 else "pole"
                return BodySpec(kind=kind, center=(rng.uniform(-A, A), rng.uniform(-A, A)), yaw=rng.uniform(-3, 3))
            placed.append(_place(rng, clutter_spec, cfg, [(b, t, r) for b, t, r in placed], 0))

    if cfg.bodies is not None:
        for spec in cfg.bodies:
            body = _make_body(rng, next_id, spec, classes, cfg.clearance)
            track, r = _centre_track(body, cfg.n_frames), _footprint_radius(spec.kind)
            for other, t2, r2 in placed:
                if not _separated(track, r, t2, r2, cfg.clearance):
                    raise SceneError(f"body {next_id} ({spec.kind}) violates the clearance with body {other.id}")
            placed.append((body, track, r))
            next_id += 1
    else:
        for _ in range(cfg.n_bodies):
            placed.append(_place(rng, lambda: _random_body_spec(rng, cfg), cfg, list(placed), next_id))
            next_id += 1

    bodies = [b for b, _, _ in placed]
    # stuff clutter keeps instance 0
    for b in bodies:
        if not classes.thing[b.class_id]:
            b.id = 0

    ego = _ego_poses(cfg)
    A = cfg.area_half_extent
    span = np.abs(np.array([p.translation[:2] for p in ego])).max() if len(ego) else 0.0
    G = A + span + 5.0
    n_bg = cfg.n_static_background_points
    background = np.column_stack([rng.uniform(-G, G, n_bg), rng.uniform(-G, G, n_bg), np.zeros(n_bg)])

    seq = SceneSequence(
        frames=[],
        fps=cfg.fps,
        classes=classes,
        bodies=bodies,
        background=background,
        background_labels=np.full(n_bg, ROAD, dtype=np.int32),
        ego_twist=TwistVector(cfg.ego_omega, cfg.ego_v),
    )
    sem_all, inst_all, mov_all = _static_labels(seq)
    for t in range(cfg.n_frames):
        world = _world_points(seq, t)
        ids = np.arange(len(world))
        keep = np.ones(len(world), dtype=bool)
        ego_pts = ego[t].inverse().apply(world)
        if cfg.range_cutoff is not None:
            keep &= np.linalg.norm(ego_pts, axis=1) <= cfg.range_cutoff
        if cfg.dropout > 0:
            frame_rng = np.random.default_rng([cfg.seed, t])
            keep &= frame_rng.random(len(world)) >= cfg.dropout
        ids = ids[keep]
        nxt = ego[t].inverse().apply(_world_points(seq, t + 1)[ids])
        seq.frames.append(
            FrameSample(
                frame_index=t,
                timestamp=t / cfg.fps,
                points=ego_pts[ids],
                semantic=sem_all[ids],
                instance=inst_all[ids],
                moving=mov_all[ids],
                pose=ego[t],
                flow=nxt - ego_pts[ids],
                point_ids=ids,
            )
        )
    return seq


def _static_labels(seq: SceneSequence):
    sem = [seq.background_labels]
    inst = [np.zeros(len(seq.background), dtype=np.int32)]
    mov = [np.zeros(len(seq.background), dtype=bool)]
    for b in seq.bodies:
        n = len(b.local_points)
        sem.append(np.full(n, b.class_id, dtype=np.int32))
        inst.append(np.full(n, b.id, dtype=np.int32))
        mov.append(np.full(n, b.moving, dtype=bool))
    return np.concatenate(sem), np.concatenate(inst), np.concatenate(mov)


def _world_points(seq: SceneSequence, t: float) -> np.ndarray:
    parts = [seq.background] + [b.world_points(t) for b in seq.bodies]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------- ground truth


def _check_index(seq: SceneSequence, *idx):
    for i in idx:
        if not 0 <= i < len(seq):
            raise IndexError(f"frame index {i} outside [0, {len(seq)})")


def gt_relative_pose(seq: SceneSequence, i: int, j: int) -> RigidTransform:
    """Transform taking frame-i ego coordinates into frame-j ego coordinates."""
    _check_index(seq, i, j)
    return compose(seq.frames[j].pose.inverse(), seq.frames[i].pose)


def gt_flow(seq: SceneSequence, i: int, m: int) -> np.ndarray:
    """Displacement of frame i's points over ``m`` frames, in frame-i ego coordinates."""
    if m < 0 or i + m >= len(seq):
        raise IndexError(f"horizon {m} from frame {i} exceeds the sequence")
    _check_index(seq, i)
    f = seq.frames[i]
    later = _world_points(seq, i + m)[f.point_ids]
    return f.pose.inverse().apply(later) - f.points


def gt_moving_mask(frame: FrameSample) -> np.ndarray:
    return np.asarray(frame.moving, dtype=bool).copy()


def body_flow_lipschitz(body: RigidBody, m: int = 1) -> float:
    """Lipschitz constant of the body's m-frame flow field, ``||R^m - I||_2``."""
    theta = float(np.linalg.norm(body.twist.omega)) * m
    return 2.0 * abs(math.sin(theta / 2.0))
