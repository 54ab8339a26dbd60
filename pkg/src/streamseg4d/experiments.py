"""Experiment drivers: single cells, sweeps, ablations, calibration and the
convergence/contraction harnesses.  Every function returns plain rows so the
CLI and the scripts share one code path.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml
from scipy.spatial import cKDTree
from scipy.stats import theilslopes

from .alignment import STRATEGIES, CLI_ALIASES, forward_flow_align, inverse_flow_iteration
from .backbone import prediction_head
from .forecasting import FlowField, MaskPolicy, apply_moving_mask
from .geometry import compose, pack_keys, rot_z
from .memory import GruWeights, VoxelMemory, query
from .metrics import METRIC_COLUMNS, rows_to_csv, streaming_evaluate
from .runtime import Components, ConfigError, CostModel, RunConfig, run_stream
from .scene import BodySpec, SceneConfig, SceneError, generate_scene, gt_flow

DATA_DIR = Path(__file__).resolve().parent / "data"
AXES = ("none", "fps", "latency", "strategy", "components")
ABLATION_ROWS = ("base", "mem", "pose", "flow", "mflow")
ABLATION_LABELS = {"base": "base", "mem": "+Mem", "pose": "+Mem+Pose", "flow": "+Mem+Pose+Flow", "mflow": "+Mem+Pose+MFlow"}


# ---------------------------------------------------------------- config files


def load_experiment_file(path) -> dict:
    """YAML (or JSON) with optional ``scene``, ``run`` and ``experiment`` sections."""
    p = Path(path)
    if not p.exists():
        # bundled references resolve by file name, with or without the suffix
        alt = [DATA_DIR / p.name, DATA_DIR / f"{p.name}.yaml"]
        found = [a for a in alt if a.exists()]
        if not found:
            raise ConfigError(f"config file {path} not found", "config")
        p = found[0]
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}", "config") from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", "config")
    return data


def scene_from(data: dict) -> SceneConfig:
    try:
        return SceneConfig.from_dict(data.get("scene", {}) or {})
    except (SceneError, TypeError) as e:
        raise ConfigError(str(e), "scene") from None


def run_from(data: dict) -> RunConfig:
    return RunConfig.from_dict(data.get("run", {}) or {})


def reference(name: str):
    """``(SceneConfig, RunConfig)`` of a bundled reference experiment."""
    data = load_experiment_file(DATA_DIR / f"{name}.yaml")
    return scene_from(data), run_from(data)


# ---------------------------------------------------------------- cells


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    axis: str = "none"
    values: Sequence = ()
    run: RunConfig = RunConfig()
    scene: SceneConfig = SceneConfig()
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}", "axis")
        vals = [json.dumps(v, sort_keys=True) for v in self.values]
        if len(set(vals)) != len(vals):
            raise ConfigError("sweep values must be distinct", "values")
        if self.axis != "none" and not self.values:
            raise ConfigError("a sweep needs at least one value", "values")

    @staticmethod
    def from_dict(d: dict) -> "ExperimentSpec":
        exp = dict(d.get("experiment", {}) or {})
        bad = set(exp) - {"name", "axis", "values", "out_dir"}
        if bad:
            raise ConfigError(f"unknown keys {sorted(bad)}", "experiment")
        return ExperimentSpec(run=run_from(d), scene=scene_from(d), **exp)


def run_cell(cfg: RunConfig, scene: SceneConfig, sequence=None):
    """One run; returns ``(report, metrics)``.  The scene is resampled at ``cfg.fps``."""
    if sequence is None:
        sc = scene if abs(scene.fps - cfg.fps) < 1e-12 else scene.at_fps(cfg.fps)
        sequence = generate_scene(sc)
    report = run_stream(cfg, sequence)
    return report, streaming_evaluate(report, sequence)


def _row(metrics, report, **extra) -> dict:
    row = dict(extra)
    row.update(metrics.row())
    row["inference_ms"] = report.timings["mean_inference_ms"]
    row["predictive_ms"] = report.timings["mean_predictive_ms"]
    row["n_fallback"] = report.timings["n_fallback"]
    return row


def cell_config(spec: ExperimentSpec, value) -> RunConfig:
    cfg = spec.run
    if spec.axis == "fps":
        return replace(cfg, fps=float(value))
    if spec.axis == "latency":
        return replace(cfg, latency=replace(cfg.latency, kind="fixed", mean_ms=float(value)))
    if spec.axis == "strategy":
        return replace(cfg, align=str(value))
    if spec.axis == "components":
        return replace(cfg, components=Components.chain(str(value)))
    return cfg


def run_experiment(spec: ExperimentSpec, save_reports: bool = False) -> List[dict]:
    """Run every cell; with ``out_dir`` writes ``<cell>.json`` metrics and ``results.csv``
    (plus ``<cell>.report.json`` runtime reports when ``save_reports``)."""
    values = list(spec.values) if spec.axis != "none" else [None]
    if spec.axis == "fps":
        values = sorted(values, key=float)
    rows = []
    out = Path(spec.out_dir) if spec.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for v in values:
        cfg = cell_config(spec, v)
        report, metrics = run_cell(cfg, spec.scene)
        rows.append(_row(metrics, report, cell=str(v if v is not None else spec.name), **({spec.axis: v} if v is not None else {})))
        if out:
            name = spec.name if v is None else f"{spec.axis}_{v}"
            (out / f"{name}.json").write_text(metrics.to_json())
            if save_reports:
                (out / f"{name}.report.json").write_text(report.to_json())
    if out:
        cols = ["cell"] + ([spec.axis] if spec.axis != "none" else []) + METRIC_COLUMNS + ["inference_ms", "predictive_ms", "n_fallback"]
        (out / "results.csv").write_text(rows_to_csv(rows, cols))
    return rows


# ---------------------------------------------------------------- ablations


def ablate(scene: SceneConfig, cfg: RunConfig, chain: Sequence[str] = ("mem", "pose", "flow", "mflow"), sequence=None) -> List[dict]:
    """Rows for base followed by the requested components, in chain order."""
    for c in chain:
        if c not in ABLATION_ROWS[1:]:
            raise ConfigError(f"unknown component {c!r}", "components")
    names = ["base"] + [c for c in ABLATION_ROWS[1:] if c in chain]
    seq = sequence if sequence is not None else generate_scene(scene if abs(scene.fps - cfg.fps) < 1e-12 else scene.at_fps(cfg.fps))
    rows = []
    for name in names:
        report, metrics = run_cell(replace(cfg, components=Components.chain(name)), scene, seq)
        rows.append(_row(metrics, report, row=ABLATION_LABELS[name]))
    return rows


def flow_ablate(scene: SceneConfig, cfg: RunConfig, strategies: Sequence[str] = ("backward", "forward", "inverse1", "brute", "iterate"), sequence=None) -> List[dict]:
    seq = sequence if sequence is not None else generate_scene(scene if abs(scene.fps - cfg.fps) < 1e-12 else scene.at_fps(cfg.fps))
    rows = []
    for s in strategies:
        if CLI_ALIASES.get(s, s) not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}", "strategies")
        report, metrics = run_cell(replace(cfg, align=s), scene, seq)
        conv = [r.n_converged / r.n_aligned for r in report.records if r.n_aligned]
        rows.append(_row(metrics, report, strategy=CLI_ALIASES.get(s, s), convergence=float(np.mean(conv)) if conv else 1.0))
    return rows


def sweep_fps(scene: SceneConfig, cfg: RunConfig, fps_values: Sequence[float] = (5, 10, 15, 20), baseline: bool = True, baseline_queue: str = "fifo") -> List[dict]:
    """sLSTQ against fps for the dual-context system and the single-context baseline.

    The baseline processes every frame in arrival order (``fifo``) unless
    ``baseline_queue`` says otherwise.
    """
    rows = []
    for fps in sorted(float(f) for f in fps_values):
        systems = [("dual", replace(cfg, fps=fps, scheduler="dual"))]
        if baseline:
            systems.append(("single", replace(cfg, fps=fps, scheduler="single", queue=baseline_queue)))
        seq = generate_scene(scene.at_fps(fps))
        for name, c in systems:
            report, metrics = run_cell(c, scene, seq)
            rows.append(_row(metrics, report, fps=fps, system=name))
    return rows


def fps_decline(rows: List[dict], system: str, metric: str = "sLSTQ") -> float:
    pts = sorted((r["fps"], r[metric]) for r in rows if r["system"] == system)
    return pts[0][1] - pts[-1][1]


# ---------------------------------------------------------------- calibration


def _synthetic_memory(n_voxels: int, dim: int, voxel_size: float = 0.2, seed: int = 0) -> VoxelMemory:
    rng = np.random.default_rng(seed)
    side = int(math.ceil(n_voxels ** (1 / 3))) + 1
    keys = rng.choice(side**3, size=n_voxels, replace=False)
    keys = np.stack(np.unravel_index(keys, (side, side, side)), axis=1).astype(np.int64)
    codes = pack_keys(keys)
    order = np.argsort(codes)
    return VoxelMemory(voxel_size, codes[order], rng.uniform(-1, 1, (n_voxels, dim)), np.zeros(n_voxels, np.int64))


def time_inference_path(mem: VoxelMemory, n_points: int, n_classes: int = 8, repeats: int = 3, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time (ms) of query + prediction head for ``n_points`` points."""
    from .backbone import InstanceCodebook

    rng = np.random.default_rng(seed)
    lo, hi = mem.centers.min(0), mem.centers.max(0)
    pts = rng.uniform(lo, hi, (n_points, 3))
    book = InstanceCodebook.from_dict({1: np.zeros(mem.dim - n_classes)}, mem.dim - n_classes)
    thing = np.zeros(n_classes, dtype=bool)
    _ = mem.index
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        if n_points:
            feats, _ = query(mem, pts)
            prediction_head(feats, book, n_classes, thing)
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.min(times))


def calibrate(point_counts=(0, 10000, 20000, 40000, 80000), n_voxels: int = 20000, dim: int = 16, repeats: int = 7, seed: int = 0) -> CostModel:
    """Theil-Sen fit of ``c_fixed + c_point * n`` to measured inference-path times.

    The median of pairwise slopes shrugs off a single stalled measurement,
    which a least-squares fit does not on a shared machine.
    """
    mem = _synthetic_memory(n_voxels, dim, seed=seed)
    n = np.array(point_counts, dtype=np.float64)
    t = np.array([time_inference_path(mem, int(k), repeats=repeats, seed=seed) for k in point_counts])
    c1, c0, _, _ = theilslopes(t, n)
    return CostModel(c_fixed_ms=max(0.0, float(c0)), c_point_us=max(0.0, float(c1) * 1000.0))


# ---------------------------------------------------------------- convergence harnesses


def rigid_flow(omega: float, center=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
    """Continuous field of a rotation ``omega`` (rad) about z through ``center`` plus a translation."""
    R = rot_z(omega)
    c = np.asarray(center, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)

    def Q(x):
        x = np.asarray(x, dtype=np.float64)
        return (x - c) @ R.T + c + t - x

    def preimage(p):
        return (np.asarray(p) - t - c) @ R + c

    return Q, preimage


def contraction_trace(omega: float, p, center=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0), eps: float = 1e-3, n_max: int = 10):
    """Iterate on the analytic field; returns ``(ratios, result)``.

    ``ratios`` holds ``||x_{n+1} - x*|| / ||x_n - x*||`` for every step with a
    nonzero denominator.
    """
    Q, pre = rigid_flow(omega, center, translation)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    x_star = pre(p)
    x = p.copy()
    ratios = []
    for _ in range(n_max):
        nxt = p - Q(x)
        num = np.linalg.norm(nxt - x_star, axis=1)
        den = np.linalg.norm(x - x_star, axis=1)
        ok = den > 1e-12
        ratios.extend((num[ok] / den[ok]).tolist())
        x = nxt
    res = inverse_flow_iteration(p, Q, eps, n_max, fallback=False)
    return np.array(ratios), res


@dataclass(frozen=True)
class ConvergenceConfig:
    n_scenes: int = 500
    n_bodies: int = 4
    omega_sigma: float = 0.05  # half-normal scale of per-body |omega|, rad/frame (0.5 rad/s at 10 fps)
    omega_max: float = 1.0
    speed_max: float = 1.0
    horizons: tuple = (1, 2, 3)
    eps: float = 1e-3
    n_max: int = 10
    scene_threshold: float = 0.99
    voxel_size: float = 0.2
    seed: int = 0


class RigidSceneField:
    """Forecast flow of a rigid scene over ``m`` frames, continuous inside each body.

    ``Q(x)`` takes the body owning the nearest keyframe point (within
    ``radius`` when given) and evaluates that body's exact ``m``-frame motion
    at ``x``; points with no support read zero.
    """

    def __init__(self, sequence, t: int, m: int, radius: Optional[float] = None, moving_only: bool = True):
        f = sequence[t]
        keep = f.moving if moving_only else np.ones(len(f), dtype=bool)
        self.points = f.points[keep]
        self.owner = f.instance[keep]
        self.radius = radius
        self.tree = cKDTree(self.points) if len(self.points) else None
        ego = [sequence[t].pose, sequence[t + m].pose]
        self.motion = {}
        for b in sequence.bodies:
            if b.id == 0:
                continue
            world = compose(b.pose(t + m), b.pose(t).inverse())
            # ego(t) -> world -> moved -> ego(t + m), then back into ego(t) coordinates of the keyframe
            self.motion[b.id] = compose(ego[0].inverse(), compose(world, ego[0]))

    def query(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        out = np.zeros_like(x)
        if self.tree is None:
            return out
        d, idx = self.tree.query(x, distance_upper_bound=np.inf if self.radius is None else self.radius)
        hit = np.isfinite(d)
        owners = np.zeros(len(x), dtype=np.int64)
        owners[hit] = self.owner[idx[hit]]
        for i in np.unique(owners[hit]):
            sel = owners == i
            out[sel] = self.motion[int(i)].apply(x[sel]) - x[sel]
        return out

    __call__ = query


def convergence_scene(cfg: ConvergenceConfig, index: int, field_kind: str = "rigid"):
    """One randomised rigid scene; returns ``(fraction converged, max body |omega|, m)``.

    ``field_kind`` is ``rigid`` (exact per-body motion, :class:`RigidSceneField`)
    or ``voxel`` (the runtime's voxelised, nearest-voxel field).
    """
    rng = np.random.default_rng([cfg.seed, index])
    m = int(rng.choice(cfg.horizons))
    bodies = []
    for b in range(cfg.n_bodies):
        w = min(cfg.omega_max, abs(rng.normal(0.0, cfg.omega_sigma))) * rng.choice([-1.0, 1.0])
        ang = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.0, cfg.speed_max)
        kind = "car" if rng.random() < 0.6 else "person"
        bodies.append(BodySpec(kind=kind, center=(b * 14.0 - 21.0, rng.uniform(-3, 3)), v=(speed * math.cos(ang), speed * math.sin(ang), 0.0), omega=(0.0, 0.0, w), yaw=rng.uniform(-math.pi, math.pi)))
    sc = SceneConfig(bodies=bodies, clutter=[], n_static_background_points=0, n_frames=m + 1, seed=int(rng.integers(1 << 31)), clearance=0.4)
    seq = generate_scene(sc)
    f0, fm = seq[0], seq[m]
    radius = 2.0 * cfg.voxel_size
    if field_kind == "rigid":
        Q = RigidSceneField(seq, 0, m).query
    elif field_kind == "voxel":
        field = FlowField.from_points(f0.points, gt_flow(seq, 0, m), cfg.voxel_size, radius, moving=f0.moving)
        Q = apply_moving_mask(field, MaskPolicy("flag")).query
    else:
        raise ConfigError(f"unknown field kind {field_kind!r}", "field_kind")
    dyn = fm.moving
    res = inverse_flow_iteration(fm.points[dyn], Q, cfg.eps, cfg.n_max)
    w_max = max(abs(b.omega[2]) for b in bodies)
    return float(res.converged.mean()) if dyn.any() else 1.0, w_max, m


def convergence_experiment(cfg: ConvergenceConfig = ConvergenceConfig(), field_kind: str = "rigid") -> dict:
    fracs, ws, ms = zip(*(convergence_scene(cfg, i, field_kind) for i in range(cfg.n_scenes)))
    fracs = np.array(fracs)
    ok = fracs >= cfg.scene_threshold
    return {
        "n_scenes": cfg.n_scenes,
        "field": field_kind,
        "scene_convergence_rate": float(ok.mean()),
        "mean_point_convergence": float(fracs.mean()),
        "failed_scenes": [int(i) for i in np.flatnonzero(~ok)],
        "failed_max_omega": [float(ws[i]) for i in np.flatnonzero(~ok)],
        "failed_horizon": [int(ms[i]) for i in np.flatnonzero(~ok)],
    }


# ---------------------------------------------------------------- forward vs iterate timing


def forward_vs_iterate(n_voxels: int = 100_000, n_points: int = 20_000, m_max: int = 10, seed: int = 0) -> dict:
    """Measured predictive-side cost of forward flow (one index per horizon)
    against one frame of inverse iteration, on the same memory and field."""
    rng = np.random.default_rng(seed)
    mem = _synthetic_memory(n_voxels, 16, seed=seed)
    centers = mem.centers
    vec = np.zeros((n_voxels, 3))
    moving = rng.random(n_voxels) < 0.2
    vec[moving] = rng.normal(0, 0.3, (int(moving.sum()), 3))
    field = FlowField(mem.voxel_size, mem.codes, vec)
    _ = field.index
    t0 = time.perf_counter()
    for m in range(1, m_max + 1):
        forward_flow_align(mem, field.scaled(m).query)
    forward_ms = (time.perf_counter() - t0) * 1000.0
    n_points = min(n_points, n_voxels)
    pts = centers[rng.choice(n_voxels, n_points, replace=False)] + rng.normal(0, 0.05, (n_points, 3))
    _ = mem.index
    t0 = time.perf_counter()
    res = inverse_flow_iteration(pts, field.scaled(3).query)
    query(mem, res.points)
    iterate_ms = (time.perf_counter() - t0) * 1000.0
    return {"n_voxels": n_voxels, "n_points": n_points, "forward_ms": forward_ms, "iterate_ms": iterate_ms, "ratio": forward_ms / iterate_ms}
