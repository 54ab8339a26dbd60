"""Alignment strategies on the rotation and translation reference scenes, plus
the forward-vs-iterate cost comparison on a large memory."""
import argparse
import json
from pathlib import Path

from streamseg4d import experiments as ex
from streamseg4d.metrics import METRIC_COLUMNS, rows_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--voxels", type=int, default=100_000)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for name in ("ref_rotation", "ref_translation"):
        scene, cfg = ex.reference(name)
        for r in ex.flow_ablate(scene, cfg):
            rows.append({"scene": name, **r})
            print(f"{name:<16} {r['strategy']:<18} sLSTQ={r['sLSTQ']:.4f} converged={r['convergence']:.3f}")
    (out / "flow_ablation.csv").write_text(rows_to_csv(rows, ["scene", "strategy"] + METRIC_COLUMNS + ["inference_ms", "convergence"]))

    t = ex.forward_vs_iterate(n_voxels=args.voxels)
    print(f"forward {t['forward_ms']:.1f} ms vs iterate {t['iterate_ms']:.1f} ms at {t['n_voxels']} voxels (ratio {t['ratio']:.1f})")
    (out / "flow_timing.json").write_text(json.dumps(t, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
