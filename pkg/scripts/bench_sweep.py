"""Fused lean kernel vs separate 1x1 + depth-wise passes over the channel/size sweep.

    python3 scripts/bench_sweep.py [--repeats 7] [--csv results/bench_sweep.csv]
"""

import argparse
from pathlib import Path

import numpy as np

from leanconv.kernels.bench import bench_sweep, sweep_shapes
from leanconv.records import rows_to_csv, rows_to_text


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--stencil", default="5pt")
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--precision", choices=("f32", "f64"), default="f32")
    ap.add_argument("--csv", type=Path, default=Path("results/bench_sweep.csv"))
    args = ap.parse_args()

    dtype = np.float32 if args.precision == "f32" else np.float64
    rows = bench_sweep(sweep_shapes(), stencil=args.stencil, batch=args.batch, repeats=args.repeats, dtype=dtype)
    print(rows_to_text(rows))
    wins = sum(r["fused_le_separate"] for r in rows)
    print(f"\nfused <= separate at {wins}/{len(rows)} sweep points")
    args.csv.parent.mkdir(parents=True, exist_ok=True)
    args.csv.write_text(rows_to_csv(rows))


if __name__ == "__main__":
    main()
