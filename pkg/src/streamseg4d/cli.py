"""Command line entry point: ``streamseg4d <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import experiments as ex
from .alignment import STRATEGIES, CLI_ALIASES
from .backbone import LatencyModel
from .data_io import FormatError, kitti_to_sequence, load_native, read_kitti_dir, save_native, sequence_to_kitti, write_kitti_dir
from .metrics import METRIC_COLUMNS, rows_to_csv
from .runtime import ConfigError, RunConfig
from .scene import SceneConfig, SceneError, generate_scene

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TIMING_COLUMNS = ["inference_ms", "predictive_ms", "n_fallback"]
log = logging.getLogger("streamseg4d")


def _load(args) -> dict:
    return ex.load_experiment_file(args.config) if args.config else {}


def _overrides(cfg: RunConfig, args) -> RunConfig:
    """Apply the flags that mirror config keys."""
    ch = {}
    if getattr(args, "fps", None) is not None:
        ch["fps"] = args.fps
    if getattr(args, "pose", None) is not None:
        ch["pose_mode"] = args.pose
    if getattr(args, "align", None) is not None:
        ch["align"] = args.align
    if getattr(args, "mode", None) is not None:
        ch["mode"] = args.mode
    if getattr(args, "eps", None) is not None:
        ch["eps"] = args.eps
    if getattr(args, "nmax", None) is not None:
        ch["n_max"] = args.nmax
    if getattr(args, "latency_ms", None) is not None:
        if args.latency_ms < 0:
            raise ConfigError("latency must be non-negative", "latency")
        ch["latency"] = LatencyModel("fixed", float(args.latency_ms))
    return replace(cfg, **ch) if ch else cfg


def _configs(args):
    data = _load(args)
    return data, ex.scene_from(data), _overrides(ex.run_from(data), args)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, rows, lead):
    path.write_text(rows_to_csv(rows, lead + METRIC_COLUMNS + [c for c in TIMING_COLUMNS if rows and c in rows[0]] + [c for c in ("convergence",) if rows and c in rows[0]]))


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    data, scene, cfg = _configs(args)
    out = _out_dir(args)
    if args.sequence:
        seq = load_native(args.sequence)
        if abs(seq.fps - cfg.fps) > 1e-9:
            raise ConfigError(f"sequence is sampled at {seq.fps} fps but the run expects {cfg.fps}", "fps")
        report, metrics = ex.run_cell(cfg, scene, seq)
        (out / "report.json").write_text(report.to_json())
        (out / "metrics.json").write_text(metrics.to_json())
        _write_csv(out / "results.csv", [ex._row(metrics, report, cell="sequence")], ["cell"])
        return EXIT_OK
    exp = dict(data.get("experiment", {}) or {})
    exp["out_dir"] = str(out)
    spec = ex.ExperimentSpec.from_dict({**data, "experiment": exp})
    spec = replace(spec, run=cfg, scene=scene)
    rows = ex.run_experiment(spec, save_reports=args.save_reports)
    for r in rows:
        print(f"{r['cell']}: sLSTQ={r['sLSTQ']:.4f} sPQ={r['sPQ']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    _, scene, cfg = _configs(args)
    chain = [c for c in args.components.split(",") if c] if args.components else []
    rows = ex.ablate(scene, cfg, chain)
    _write_csv(_out_dir(args) / "ablation.csv", rows, ["row"])
    for r in rows:
        print(f"{r['row']}: sLSTQ={r['sLSTQ']:.4f}")
    return EXIT_OK


def cmd_flow_ablate(args) -> int:
    _, scene, cfg = _configs(args)
    strategies = [s for s in args.strategies.split(",") if s]
    rows = ex.flow_ablate(scene, cfg, strategies)
    out = _out_dir(args)
    _write_csv(out / "flow_ablation.csv", rows, ["strategy"])
    if args.timing:
        t = ex.forward_vs_iterate(n_voxels=args.timing_voxels)
        (out / "flow_timing.json").write_text(json.dumps(t, sort_keys=True, indent=2))
    for r in rows:
        print(f"{r['strategy']}: sLSTQ={r['sLSTQ']:.4f} inference_ms={r['inference_ms']:.3f}")
    return EXIT_OK


def cmd_sweep_fps(args) -> int:
    data, scene, cfg = _configs(args)
    values = [float(v) for v in args.values.split(",")] if args.values else list((data.get("experiment") or {}).get("values") or (5, 10, 15, 20))
    if len(set(values)) != len(values):
        raise ConfigError("sweep values must be distinct", "values")
    rows = ex.sweep_fps(scene, cfg, values, baseline=not args.no_baseline, baseline_queue=args.baseline_queue)
    _write_csv(_out_dir(args) / "fps_sweep.csv", rows, ["fps", "system"])
    for r in rows:
        print(f"{r['fps']:g} fps {r['system']}: sLSTQ={r['sLSTQ']:.4f}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    costs = ex.calibrate(repeats=args.repeats)
    target = Path(args.out or "calibration.yaml")
    data = yaml.safe_load(target.read_text()) if target.exists() else {}
    data = data or {}
    run = data.setdefault("run", {}) or {}
    run["costs"] = {**(run.get("costs") or {}), "c_fixed_ms": costs.c_fixed_ms, "c_point_us": costs.c_point_us}
    data["run"] = run
    target.write_text(yaml.safe_dump(data, sort_keys=False))
    print(f"c_fixed_ms={costs.c_fixed_ms:.4f} c_point_us={costs.c_point_us:.5f} -> {target}")
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    data = _load(args)
    scene = ex.scene_from(data)
    if args.frames is not None:
        scene = replace(scene, n_frames=args.frames)
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    seq = generate_scene(scene)
    out = _out_dir(args)
    if args.format == "kitti":
        frames, poses = sequence_to_kitti(seq)
        write_kitti_dir(frames, poses, out)
    else:
        save_native(seq, out / "sequence.s4d")
    print(f"wrote {len(seq)} frames to {out}")
    return EXIT_OK


def cmd_convert_kitti(args) -> int:
    frames, poses = read_kitti_dir(args.input)
    if not frames:
        raise FormatError(f"no scans under {args.input}", field="path")
    seq = kitti_to_sequence(frames, poses, fps=args.fps or 10.0)
    target = Path(args.out or "sequence.s4d")
    target.parent.mkdir(parents=True, exist_ok=True)
    save_native(seq, target)
    print(f"converted {len(seq)} scans to {target}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _run_flags(p):
    p.add_argument("--config", help="YAML/JSON file with scene, run and experiment sections")
    p.add_argument("--fps", type=float)
    p.add_argument("--pose", choices=["known", "unknown"])
    p.add_argument("--align", choices=sorted(set(STRATEGIES) | set(CLI_ALIASES)))
    p.add_argument("--latency-ms", type=float, dest="latency_ms")
    p.add_argument("--mode", choices=["virtual", "wallclock"])
    p.add_argument("--eps", type=float)
    p.add_argument("--nmax", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamseg4d", description="Streaming 4D panoptic segmentation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one cell or a sweep from a config")
    _run_flags(p)
    p.add_argument("--sequence", help="native sequence file instead of the config's scene")
    p.add_argument("--save-reports", action="store_true", dest="save_reports")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="component ablation rows")
    _run_flags(p)
    p.add_argument("--components", default="mem,pose,flow,mflow")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("flow-ablate", help="flow alignment strategy comparison")
    _run_flags(p)
    p.add_argument("--strategies", default="backward,forward,inverse1,brute,iterate")
    p.add_argument("--timing", action="store_true", help="also time forward against iterate on a large memory")
    p.add_argument("--timing-voxels", type=int, default=100_000, dest="timing_voxels")
    p.set_defaults(func=cmd_flow_ablate)

    p = sub.add_parser("sweep-fps", help="sLSTQ against frame rate, dual-context vs single-context")
    _run_flags(p)
    p.add_argument("--values", help="comma separated fps values")
    p.add_argument("--no-baseline", action="store_true", dest="no_baseline")
    p.add_argument("--baseline-queue", choices=["fifo", "latest"], default="fifo", dest="baseline_queue")
    p.set_defaults(func=cmd_sweep_fps)

    p = sub.add_parser("calibrate", help="fit inference cost coefficients on this machine")
    p.add_argument("--out", help="config file to update (created if missing)")
    p.add_argument("--repeats", type=int, default=7)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-scene", help="write a synthetic sequence")
    p.add_argument("--config")
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["native", "kitti"], default="native")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("convert-kitti", help="convert a KITTI-layout directory to a native sequence")
    p.add_argument("input")
    p.add_argument("--fps", type=float)
    p.add_argument("--out", help="output file")
    p.set_defaults(func=cmd_convert_kitti)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, SceneError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # anything past validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
