"""sLSTQ against frame rate for the dual-context runtime and the blocking baseline."""
import argparse
from pathlib import Path

from streamseg4d import experiments as ex
from streamseg4d.metrics import METRIC_COLUMNS, rows_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="ref_fps")
    ap.add_argument("--values", default="5,10,15,20")
    ap.add_argument("--baseline-queue", choices=["fifo", "latest"], default="fifo")
    ap.add_argument("--out", default="results/fps_sweep.csv")
    args = ap.parse_args()

    scene, cfg = ex.reference(args.config)
    rows = ex.sweep_fps(scene, cfg, [float(v) for v in args.values.split(",")], baseline_queue=args.baseline_queue)
    for r in rows:
        print(f"{r['fps']:5g} fps {r['system']:<6} sLSTQ={r['sLSTQ']:.4f} fallback={r['n_fallback']}")
    for system in ("dual", "single"):
        print(f"{system}: decline {ex.fps_decline(rows, system):+.4f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows, ["fps", "system"] + METRIC_COLUMNS + ["n_fallback"]))


if __name__ == "__main__":
    main()
