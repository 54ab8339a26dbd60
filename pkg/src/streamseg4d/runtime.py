"""Dual-context streaming runtime.

The predictive context turns keyframes into published snapshots (memory,
pose and flow forecasts); the inference context answers every frame at its
arrival from the newest snapshot.  In virtual mode every cost is declared, so
a run is a deterministic function of its configuration.  Times are in
milliseconds.
"""
from __future__ import annotations

import base64
import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

import numpy as np

from .alignment import AlignmentStrategy, align_points, ego_align, forward_flow_align, negated
from .backbone import HeadError, InstanceCodebook, LatencyModel, NoiseConfig, OracleBackbone, prediction_head
from .forecasting import (
    FlowField,
    FlowMemory,
    MaskPolicy,
    PoseMemory,
    apply_moving_mask,
    estimate_key_flow,
    estimate_pose,
    forecast_pose,
    key_displacement_field,
    update_flow_memory,
    update_pose_memory,
)
from .geometry import RigidTransform, SpatialIndex, compose, se3_exp
from .memory import HIT_FALLBACK, GruWeights, Snapshot, SnapshotStore, VoxelMemory, align_memory, gru_update, query, voxelize_features

EPS_T = 1e-9


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: Optional[str] = None):
        super().__init__(message if field_name is None else f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class CostModel:
    c_fixed_ms: float = 1.0
    c_point_us: float = 0.5
    pipeline_ms: float = 0.0  # predictive work besides the backbone
    c_rebuild_us: float = 0.3  # forward-flow index rebuild, per voxel and horizon

    def inference_ms(self, n_points: int) -> float:
        return self.c_fixed_ms + self.c_point_us * n_points / 1000.0


@dataclass(frozen=True)
class Components:
    memory: bool = True
    pose: bool = True
    flow: bool = True
    moving_mask: bool = True

    @staticmethod
    def chain(name: str) -> "Components":
        """Ablation rows: base, mem, pose, flow, mflow."""
        table = {
            "base": Components(False, False, False, False),
            "mem": Components(True, False, False, False),
            "pose": Components(True, True, False, False),
            "flow": Components(True, True, True, False),
            "mflow": Components(True, True, True, True),
        }
        if name not in table:
            raise ConfigError(f"unknown component {name!r}", "components")
        return table[name]


@dataclass(frozen=True)
class RunConfig:
    fps: float = 10.0
    pose_mode: str = "known"
    align: str = "iterate"
    eps: float = 1e-3
    n_max: int = 10
    brute_radius: Optional[float] = None
    latency: LatencyModel = LatencyModel()
    noise: NoiseConfig = NoiseConfig()
    costs: CostModel = CostModel()
    components: Components = Components()
    mask_policy: str = "threshold"
    theta_move: Optional[float] = None
    flow_source: str = "rigid"
    voxel_size: float = 0.2
    flow_radius: Optional[float] = None
    m_max: int = 10
    alpha: float = 0.8
    alpha_f: float = 0.7
    fallback: str = "requery"
    mode: str = "virtual"
    scheduler: str = "dual"
    queue: str = "latest"
    gru_weights: Optional[str] = None
    fresh_weight: float = 0.9
    time_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.fps > 0, "fps", "must be positive"),
            (self.pose_mode in ("known", "unknown"), "pose_mode", "must be known or unknown"),
            (self.flow_source in ("rigid", "gt"), "flow_source", "must be rigid or gt"),
            (self.mask_policy in ("threshold", "flag", "none"), "mask_policy", "must be threshold, flag or none"),
            (self.fallback in ("requery", "label_copy"), "fallback", "must be requery or label_copy"),
            (self.mode in ("virtual", "wallclock"), "mode", "must be virtual or wallclock"),
            (self.scheduler in ("dual", "single"), "scheduler", "must be dual or single"),
            (self.queue in ("latest", "fifo"), "queue", "must be latest or fifo"),
            (self.voxel_size > 0, "voxel_size", "must be positive"),
            (self.m_max >= 1, "m_max", "must be at least 1"),
            (0 <= self.alpha < 1, "alpha", "must lie in [0, 1)"),
            (0 <= self.alpha_f < 1, "alpha_f", "must lie in [0, 1)"),
            (self.time_scale > 0, "time_scale", "must be positive"),
            (0 < self.fresh_weight <= 1, "fresh_weight", "must lie in (0, 1]"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(msg, name)
        for name in ("c_fixed_ms", "c_point_us", "pipeline_ms", "c_rebuild_us"):
            if getattr(self.costs, name) < 0:
                raise ConfigError("costs must be non-negative", f"costs.{name}")
        try:
            self.strategy
        except ValueError as e:
            raise ConfigError(str(e), "align") from None

    @property
    def strategy(self) -> AlignmentStrategy:
        return AlignmentStrategy(self.align, self.eps, self.n_max, self.brute_radius)

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.fps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latency"]["trace"] = list(d["latency"]["trace"])
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "run")
        nested = {"latency": LatencyModel, "noise": NoiseConfig, "costs": CostModel, "components": Components}
        for key, cls in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                bad = set(sub) - {f.name for f in fields(cls)}
                if bad:
                    raise ConfigError(f"unknown keys {sorted(bad)}", key)
                if "trace" in sub:
                    sub["trace"] = tuple(sub["trace"])
                try:
                    d[key] = cls(**sub)
                except (TypeError, ValueError) as e:
                    raise ConfigError(str(e), key) from None
        try:
            return RunConfig(**d)
        except TypeError as e:
            raise ConfigError(str(e), "run") from None


# ---------------------------------------------------------------- clock


@dataclass
class FrameClock:
    fps: float
    mode: str = "virtual"
    now: float = 0.0  # ms
    time_scale: float = 1.0
    _t0: Optional[float] = None

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.fps

    def arrival(self, i: int) -> float:
        return i * self.period_ms

    def frames_arrived(self, t: float) -> int:
        """Index of the newest frame that has arrived by time ``t`` (-1 before frame 0)."""
        if t < -EPS_T:
            return -1
        return int(math.floor(t / self.period_ms + EPS_T))

    def start(self):
        self._t0 = time.perf_counter()

    def wall_ms(self) -> float:
        return (time.perf_counter() - self._t0) * 1000.0 / self.time_scale

    def sleep_until(self, t_ms: float):
        dt = (t_ms - self.wall_ms()) * self.time_scale / 1000.0
        if dt > 0:
            time.sleep(dt)


def select_keyframe(now: float, frames_arrived: int) -> int:
    """The predictive context always takes the newest arrived frame."""
    if frames_arrived < 0:
        raise ValueError(f"no frame has arrived at t={now}")
    return frames_arrived


def keyframe_schedule(n_frames: int, fps: float, latencies_ms, queue: str = "latest"):
    """Virtual schedule ``[(keyframe, start_ms, publish_ms)]``.

    ``latencies_ms(call_index, keyframe)`` gives the cost of each predictive step.
    """
    clock = FrameClock(fps)
    out = []
    t, last, call = 0.0, -1, 0
    while last < n_frames - 1:
        if queue == "fifo":
            k = last + 1
        else:
            k = min(n_frames - 1, select_keyframe(t, clock.frames_arrived(t)))
        if k <= last:
            k = last + 1
        t = max(t, clock.arrival(k))
        done = t + latencies_ms(call, k)
        out.append((k, t, done))
        t, last, call = done, k, call + 1
    return out


# ---------------------------------------------------------------- records


@dataclass
class StreamRecord:
    frame_index: int
    arrival_ms: float
    emit_ms: float
    snapshot_version: int
    keyframe_index: int
    m: int
    m_used: int
    clamped: bool
    fallback: bool
    cost_ms: float
    semantic: np.ndarray
    instance: np.ndarray
    hit_kind: np.ndarray
    n_converged: int = 0
    n_aligned: int = 0
    mean_iterations: float = 0.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "frame_index", "arrival_ms", "emit_ms", "snapshot_version", "keyframe_index", "m", "m_used",
            "clamped", "fallback", "cost_ms", "n_converged", "n_aligned", "mean_iterations")}
        d["semantic"] = _b64(self.semantic)
        d["instance"] = _b64(self.instance)
        d["hit_kind"] = _b64(self.hit_kind)
        return d

    @staticmethod
    def from_dict(d: dict) -> "StreamRecord":
        d = dict(d)
        for k in ("semantic", "instance", "hit_kind"):
            d[k] = _unb64(d[k])
        return StreamRecord(**d)


def _b64(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<i4").tobytes()).decode("ascii")


def _unb64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<i4").astype(np.int32)


@dataclass
class StreamReport:
    config: dict
    records: List[StreamRecord]
    schedule: List[dict]
    timings: dict
    n_frames: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": "streamseg4d.report/1",
                "config": self.config,
                "n_frames": self.n_frames,
                "schedule": self.schedule,
                "timings": self.timings,
                "records": [r.to_dict() for r in self.records],
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @staticmethod
    def from_json(text: str) -> "StreamReport":
        d = json.loads(text)
        return StreamReport(d["config"], [StreamRecord.from_dict(r) for r in d["records"]], d["schedule"], d["timings"], d["n_frames"])

    def labels(self):
        return [(r.semantic, r.instance) for r in self.records]


# ---------------------------------------------------------------- predictive context


@dataclass
class ForecastTable:
    """Per-horizon pose forecasts and the (masked) per-frame flow field of one snapshot."""

    poses: List[RigidTransform]
    flow: Optional[FlowField]
    keyframe_pose: RigidTransform  # world_from_ego of the keyframe (known-pose mode)
    _forward: Dict[int, object] = field(default_factory=dict)

    def flow_at(self, m: int) -> Optional[FlowField]:
        if self.flow is None or len(self.flow) == 0:
            return None
        return self.flow.scaled(float(m))

    def forward(self, memory: VoxelMemory, m: int):
        # memoised; the computation is a pure function of the snapshot
        if m not in self._forward:
            fld = self.flow_at(m)
            Q = fld.query if fld is not None else (lambda x: np.zeros_like(x))
            self._forward[m] = forward_flow_align(memory, Q)
        return self._forward[m]


@dataclass
class KeyframeState:
    index: int
    points: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    point_ids: Optional[np.ndarray]
    pose: RigidTransform


class PredictiveContext:
    """Exclusive writer of the memories and forecast tables."""

    def __init__(self, cfg: RunConfig, classes, backbone=None, weights: Optional[GruWeights] = None):
        self.cfg = cfg
        self.classes = classes
        self.n_classes = classes.n_classes
        self.thing = np.asarray(classes.thing, dtype=bool)
        self.moving_cls = np.asarray(classes.moving, dtype=bool)
        self.backbone = backbone or OracleBackbone(self.n_classes, noise=cfg.noise, latency=cfg.latency)
        dim = self.n_classes + self.backbone.embed_dim
        if weights is None and cfg.gru_weights:
            weights = GruWeights.load(cfg.gru_weights)
        self.weights = weights or GruWeights.default(dim, cfg.fresh_weight)
        if self.weights.dim != dim:
            raise ConfigError(f"GRU weights have dimension {self.weights.dim}, features have {dim}", "gru_weights")
        self.memory = VoxelMemory.empty(cfg.voxel_size, dim)
        self.codebook = InstanceCodebook()
        self.pose_mem = PoseMemory.create(cfg.alpha, cfg.m_max)
        self.flow_mem = FlowMemory(cfg.alpha_f)
        self.prev: Optional[KeyframeState] = None
        self.calls = 0
        self.store = SnapshotStore()

    def _mask_policy(self) -> MaskPolicy:
        if not self.cfg.components.moving_mask:
            return MaskPolicy("none")
        return MaskPolicy(self.cfg.mask_policy, self.cfg.theta_move)

    def step(self, frame, publish_time: float = 0.0):
        """Process one keyframe; returns ``(snapshot, cost_ms)`` (snapshot published)."""
        cfg = self.cfg
        call = self.calls
        self.calls += 1
        out = self.backbone.segment(frame, call)
        sem, inst = prediction_head(out.features, out.codebook, self.n_classes, self.thing)
        pts = np.asarray(frame.points, dtype=np.float64)
        cur = KeyframeState(frame.frame_index, pts, sem, inst, getattr(frame, "point_ids", None), frame.pose)

        p_rel = RigidTransform.identity()
        disp = None
        if self.prev is not None:
            k = cur.index - self.prev.index
            if cfg.pose_mode == "known":
                p_rel = compose(cur.pose.inverse(), self.prev.pose)
            else:
                init = se3_exp(self.pose_mem.twist.scaled(k)) if self.pose_mem.n_updates else RigidTransform.identity()
                p_rel = estimate_pose(self.prev.points, pts, init)
            self.pose_mem = update_pose_memory(self.pose_mem, p_rel, k)
            if cfg.components.flow:
                key_flow, disp = self._key_flow(frame, cur, p_rel, k)
                self.flow_mem = update_flow_memory(self.flow_mem, key_flow, p_rel, disp)

        if cfg.components.memory:
            aligned = align_memory(self.memory, p_rel, disp)
            codes, feats = voxelize_features(pts, out.features, cfg.voxel_size)
            self.memory = gru_update(aligned, codes, feats, self.weights, cur.index)
            self.codebook = self.codebook.merged(self._encode_codebook(out.codebook))

        flow = None
        if cfg.components.flow and self.flow_mem.state is not None:
            flow = apply_moving_mask(self.flow_mem.state, self._mask_policy())
        table = ForecastTable(
            poses=[forecast_pose(self.pose_mem, m) for m in range(1, cfg.m_max + 1)],
            flow=flow,
            keyframe_pose=cur.pose,
        )
        cost = out.latency_ms + cfg.costs.pipeline_ms
        if cfg.align in ("forward", "forward_flow") and cfg.components.flow:
            cost += cfg.costs.c_rebuild_us * len(self.memory) * cfg.m_max / 1000.0
        self.prev = cur
        snap = self.store.publish(
            replace(self.memory, codebook=self.codebook),
            cur.index,
            codebook=self.codebook,
            publish_time=publish_time,
            table=table,
            keyframe=cur,
        )
        return snap, cost

    def _encode_codebook(self, book: InstanceCodebook) -> InstanceCodebook:
        C = self.n_classes

        def enc(cents):
            f = np.hstack([np.zeros((len(cents), C)), cents])
            return self.weights.encode(f)[:, C:]

        return book.mapped(enc)

    def _key_flow(self, frame, cur: KeyframeState, p_rel: RigidTransform, k: int):
        cfg, prev = self.cfg, self.prev
        r = cfg.flow_radius
        prev_comp = p_rel.apply(prev.points)
        if cfg.flow_source == "gt":
            key_flow = FlowField.from_points(cur.points, frame.flow, cfg.voxel_size, r, moving=frame.moving)
            _, ia, ib = np.intersect1d(prev.point_ids, cur.point_ids, return_indices=True)
            disp = FlowField.from_points(prev_comp[ia], cur.points[ib] - prev_comp[ia], cfg.voxel_size, r)
            return key_flow, disp
        moving = self.moving_cls[cur.semantic]
        key_flow = estimate_key_flow(prev.points, cur.points, (prev.instance, cur.instance), p_rel, k, cfg.voxel_size, r, moving=moving)
        disp = key_displacement_field(prev_comp, prev.instance, key_flow.motion, cfg.voxel_size, r, cur.points, cur.instance)
        return key_flow, disp


# ---------------------------------------------------------------- inference context


class InferenceContext:
    """Exclusive writer of stream records; reads published snapshots only."""

    def __init__(self, cfg: RunConfig, classes):
        self.cfg = cfg
        self.n_classes = classes.n_classes
        self.thing = np.asarray(classes.thing, dtype=bool)
        self.prev_record: Optional[StreamRecord] = None
        self.prev_points: Optional[np.ndarray] = None

    def step(self, frame, snap: Optional[Snapshot], arrival_ms: float, force_fallback: Optional[bool] = None, cost_ms: Optional[float] = None) -> StreamRecord:
        cfg = self.cfg
        pts = np.asarray(frame.points, dtype=np.float64)
        n = len(pts)
        if cost_ms is None:
            cost_ms = cfg.costs.inference_ms(n)
        fallback = cost_ms > cfg.period_ms + EPS_T if force_fallback is None else force_fallback
        i = frame.frame_index
        if snap is None:
            rec = self._void(i, arrival_ms, n, cost_ms, fallback)
        elif fallback:
            rec = self._fallback(frame, snap, arrival_ms, cost_ms)
        else:
            rec = self._answer(frame, snap, arrival_ms, cost_ms)
        self.prev_record, self.prev_points = rec, pts
        return rec

    def _void(self, i, arrival, n, cost, fallback):
        z = np.zeros(n, dtype=np.int32)
        emit = arrival + (self.cfg.period_ms if fallback else cost)
        return StreamRecord(i, arrival, emit, 0, -1, -1, -1, False, fallback, cost, z, z.copy(), np.full(n, HIT_FALLBACK, np.int32))

    def _decode(self, feats, snap):
        try:
            return prediction_head(feats, snap.codebook, self.n_classes, self.thing)
        except HeadError:
            sem = np.argmax(feats[:, : self.n_classes], axis=1).astype(np.int32)
            return sem, np.zeros(len(sem), dtype=np.int32)

    def _transfer(self, kf: KeyframeState, pts):
        idx, _ = SpatialIndex(kf.points).nn_query(pts)
        return kf.semantic[idx].astype(np.int32), kf.instance[idx].astype(np.int32)

    def _fallback(self, frame, snap, arrival, cost) -> StreamRecord:
        cfg = self.cfg
        pts = np.asarray(frame.points, dtype=np.float64)
        m = frame.frame_index - snap.keyframe_index
        hit = np.full(len(pts), HIT_FALLBACK, np.int32)
        if cfg.fallback == "label_copy" and self.prev_record is not None:
            prev = self.prev_record
            if len(self.prev_points) == len(pts):
                sem, inst = prev.semantic.copy(), prev.instance.copy()
            else:
                idx, _ = SpatialIndex(self.prev_points).nn_query(pts)
                sem, inst = prev.semantic[idx], prev.instance[idx]
        elif cfg.components.memory and len(snap.memory):
            feats, kind = query(snap.memory, pts)
            sem, inst = self._decode(feats, snap)
            hit = kind.astype(np.int32)
        else:
            sem, inst = self._transfer(snap.payload["keyframe"], pts)
        return StreamRecord(
            frame.frame_index, arrival, arrival + cfg.period_ms, snap.version, snap.keyframe_index,
            m, min(m, cfg.m_max), m > cfg.m_max, True, cost, sem, inst, hit,
        )

    def _answer(self, frame, snap, arrival, cost) -> StreamRecord:
        cfg = self.cfg
        comp = cfg.components
        pts = np.asarray(frame.points, dtype=np.float64)
        m = frame.frame_index - snap.keyframe_index
        m_used = min(m, cfg.m_max)
        table: ForecastTable = snap.payload["table"]
        n_conv = n_al = 0
        mean_it = 0.0

        if not comp.memory:
            sem, inst = self._transfer(snap.payload["keyframe"], pts)
            hit = np.full(len(pts), HIT_FALLBACK, np.int32)
        else:
            p = pts
            if comp.pose and m > 0:
                if cfg.pose_mode == "known":
                    p = compose(table.keyframe_pose.inverse(), frame.pose).apply(pts)
                else:
                    p = ego_align(pts, table.poses[m_used - 1])
            strategy = cfg.strategy
            fld = table.flow_at(m_used) if (comp.flow and m > 0) else None
            if fld is not None and strategy.kind == "forward_flow":
                fa = table.forward(snap.memory, m_used)
                feats, kind = fa.query(p)
            else:
                Q = fld.query if fld is not None else None
                p2, res = align_points(p, strategy, Q, snap.memory)
                if Q is not None:
                    n_conv, n_al = int(res.converged.sum()), len(res.converged)
                    mean_it = float(res.iterations.mean()) if len(res.iterations) else 0.0
                feats, kind = query(snap.memory, p2)
            sem, inst = self._decode(feats, snap)
            hit = kind.astype(np.int32)
        return StreamRecord(
            frame.frame_index, arrival, arrival + cost, snap.version, snap.keyframe_index,
            m, m_used, m > cfg.m_max, False, cost, sem.astype(np.int32), inst.astype(np.int32), hit,
            n_conv, n_al, mean_it,
        )


# ---------------------------------------------------------------- single-context baseline


def _run_single(cfg: RunConfig, sequence, backbone) -> StreamReport:
    """One context that fully processes a frame before looking at the next.

    Each frame is answered with the newest completed result, transferred to
    its points by nearest neighbour.
    """
    classes = sequence.classes
    thing = np.asarray(classes.thing, dtype=bool)
    n = len(sequence)
    backbone = backbone or OracleBackbone(classes.n_classes, noise=cfg.noise, latency=cfg.latency)
    outputs = {}

    def lat(call, k):
        out = backbone.segment(sequence[k], call)
        outputs[k] = out
        return out.latency_ms + cfg.costs.pipeline_ms

    sched = keyframe_schedule(n, cfg.fps, lat, cfg.queue)
    clock = FrameClock(cfg.fps)
    records = []
    for frame in sequence.frames:
        i = frame.frame_index
        t = clock.arrival(i)
        done = [(k, s, d) for k, s, d in sched if d <= t + EPS_T]
        pts = np.asarray(frame.points)
        if not done:
            z = np.zeros(len(pts), dtype=np.int32)
            records.append(StreamRecord(i, t, t, 0, -1, -1, -1, False, True, 0.0, z, z.copy(), np.full(len(pts), HIT_FALLBACK, np.int32)))
            continue
        k = done[-1][0]
        out = outputs[k]
        sem_k, inst_k = prediction_head(out.features, out.codebook, classes.n_classes, thing)
        idx, _ = SpatialIndex(sequence[k].points).nn_query(pts)
        own = k == i
        records.append(StreamRecord(
            i, t, t, len(done), k, i - k, i - k, False, not own, 0.0,
            sem_k[idx].astype(np.int32), inst_k[idx].astype(np.int32), np.full(len(pts), HIT_FALLBACK, np.int32),
        ))
    schedule = [{"keyframe": k, "start_ms": s, "publish_ms": d} for k, s, d in sched]
    return StreamReport(cfg.to_dict(), records, schedule, _timings(records, schedule), n)


# ---------------------------------------------------------------- drivers


def _timings(records, schedule) -> dict:
    costs = [r.cost_ms for r in records]
    lat = [s["publish_ms"] - s["start_ms"] for s in schedule]
    return {
        "mean_inference_ms": float(np.mean(costs)) if costs else 0.0,
        "mean_predictive_ms": float(np.mean(lat)) if lat else 0.0,
        "n_keyframes": len(schedule),
        "n_fallback": int(sum(r.fallback for r in records)),
        "mean_m": float(np.mean([r.m for r in records if r.m >= 0])) if any(r.m >= 0 for r in records) else 0.0,
    }


def run_predictive_step(ctx: PredictiveContext, keyframe, publish_time: float = 0.0) -> Snapshot:
    return ctx.step(keyframe, publish_time)[0]


def run_inference_step(ctx: InferenceContext, frame, snapshot: Optional[Snapshot], arrival_ms: Optional[float] = None) -> StreamRecord:
    if arrival_ms is None:
        arrival_ms = frame.frame_index * ctx.cfg.period_ms
    return ctx.step(frame, snapshot, arrival_ms)


def run_stream(cfg: RunConfig, sequence, backbone=None, weights: Optional[GruWeights] = None, replay: Optional[dict] = None) -> StreamReport:
    """Run a whole sequence; ``replay`` (a wall-clock report's schedule) fixes keyframes and bindings."""
    if len(sequence) == 0:
        raise ConfigError("sequence is empty", "sequence")
    if abs(sequence.fps - cfg.fps) > 1e-9:
        raise ConfigError(f"sequence is sampled at {sequence.fps} fps but the run expects {cfg.fps}", "fps")
    if cfg.scheduler == "single":
        return _run_single(cfg, sequence, backbone)
    if cfg.mode == "wallclock" and replay is None:
        return _run_wallclock(cfg, sequence, backbone, weights)
    return _run_virtual(cfg, sequence, backbone, weights, replay)


def _run_virtual(cfg, sequence, backbone, weights, replay) -> StreamReport:
    n = len(sequence)
    pred = PredictiveContext(cfg, sequence.classes, backbone, weights)
    infer = InferenceContext(cfg, sequence.classes)
    clock = FrameClock(cfg.fps)

    if replay is None:
        def lat(call, k):
            snap, cost = pred.step(sequence[k])
            published.append(snap)
            return cost

        published: List[Snapshot] = []
        sched = keyframe_schedule(n, cfg.fps, lat)
        snaps = [replace(s, publish_time=d) for s, (_, _, d) in zip(published, sched)]
        binding = None
    else:
        sched = [(s["keyframe"], s["start_ms"], s["publish_ms"]) for s in replay["schedule"]]
        snaps = [replace(pred.step(sequence[k], d)[0], publish_time=d) for k, _, d in sched]
        binding = replay["bindings"]

    records = []
    for frame in sequence.frames:
        i = frame.frame_index
        t = clock.arrival(i)
        if binding is None:
            avail = [s for s in snaps if s.publish_time <= t + EPS_T]
            snap = avail[-1] if avail else None
            rec = infer.step(frame, snap, t)
        else:
            v = binding[i]["version"]
            snap = snaps[v - 1] if v > 0 else None
            rec = infer.step(frame, snap, t, force_fallback=binding[i]["fallback"])
        records.append(rec)
    schedule = [{"keyframe": k, "start_ms": s, "publish_ms": d} for k, s, d in sched]
    return StreamReport(cfg.to_dict(), records, schedule, _timings(records, schedule), n)


def _run_wallclock(cfg, sequence, backbone, weights) -> StreamReport:
    """Two real threads; declared backbone latency is honoured by sleeping."""
    n = len(sequence)
    pred = PredictiveContext(cfg, sequence.classes, backbone, weights)
    infer = InferenceContext(cfg, sequence.classes)
    clock = FrameClock(cfg.fps, "wallclock", time_scale=cfg.time_scale)
    sched, records, bindings = [], [], []
    errors = []
    snaps: List[Snapshot] = []
    latest = [None]  # single reference swapped by the predictive thread

    def predictive():
        try:
            last = -1
            while last < n - 1:
                now = clock.wall_ms()
                k = min(n - 1, clock.frames_arrived(now))
                if k <= last:
                    clock.sleep_until(clock.arrival(last + 1))
                    continue
                start = clock.wall_ms()
                snap, cost = pred.step(sequence[k])
                clock.sleep_until(start + cost)
                done = clock.wall_ms()
                snap = replace(snap, publish_time=done)
                snaps.append(snap)
                latest[0] = snap
                sched.append({"keyframe": k, "start_ms": start, "publish_ms": done})
                last = k
        except Exception as e:  # surfaced after join
            errors.append(e)

    def inference():
        try:
            for frame in sequence.frames:
                t = clock.arrival(frame.frame_index)
                clock.sleep_until(t)
                snap = latest[0]
                before = infer.prev_record, infer.prev_points
                t0 = time.perf_counter()
                rec = infer.step(frame, snap, t, force_fallback=False)
                real = (time.perf_counter() - t0) * 1000.0 / cfg.time_scale
                rec.cost_ms = real
                if real > cfg.period_ms:
                    # missed the deadline: answer as the fallback rule prescribes
                    infer.prev_record, infer.prev_points = before
                    rec = infer.step(frame, snap, t, force_fallback=True, cost_ms=real)
                records.append(rec)
                bindings.append({"version": 0 if snap is None else snap.version, "fallback": rec.fallback})
        except Exception as e:
            errors.append(e)

    clock.start()
    threads = [threading.Thread(target=predictive, name="predictive"), threading.Thread(target=inference, name="inference")]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    rep = StreamReport(cfg.to_dict(), records, sched, _timings(records, sched), n)
    rep.bindings = bindings
    return rep


def replay_schedule(report: StreamReport) -> dict:
    """Schedule and per-frame bindings of a wall-clock run, for virtual replay."""
    return {"schedule": report.schedule, "bindings": getattr(report, "bindings")}
