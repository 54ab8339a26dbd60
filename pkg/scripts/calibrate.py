"""Fit the inference cost model on this machine and report its repeatability."""
import argparse

import numpy as np

from streamseg4d import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=3)
    args = ap.parse_args()

    fits = [ex.calibrate() for _ in range(args.runs)]
    for c in fits:
        print(f"c_fixed_ms={c.c_fixed_ms:.4f} c_point_us={c.c_point_us:.5f}")
    cp = np.array([c.c_point_us for c in fits])
    print(f"c_point spread max/min = {cp.max() / cp.min():.3f}")
    mem = ex._synthetic_memory(20000, 16)
    for n in (10000, 20000, 40000, 80000):
        print(f"{n:6d} points: {ex.time_inference_path(mem, n, repeats=7):.2f} ms")


if __name__ == "__main__":
    main()
