"""Res18 parameter and multiplication totals over stencil x group settings.

Prints our counts beside reference values (millions) and writes a CSV.

    python3 scripts/count_tables.py [--csv results/res18_counts.csv] [--transition branch]
"""

import argparse
from pathlib import Path

from leanconv.network import LeanResNet, table_config
from leanconv.records import rows_to_csv, rows_to_text

# (stencil, group rule) -> (params M, mults M) for Res18 on 32x32 inputs, 10 classes
REFERENCE = {
    ("9pt", "1"): (2.7, 181), ("5pt", "1"): (1.5, 101), ("3pt", "1"): (0.92, 62),
    ("9pt", "cin"): (0.33, 25), ("9pt", "32"): (0.39, 27), ("9pt", "16"): (0.46, 32), ("9pt", "8"): (0.62, 42),
    ("9pt", "cin/32"): (0.80, 107), ("9pt", "cin/16"): (0.56, 64), ("9pt", "cin/8"): (0.43, 43),
    ("5pt", "cin"): (0.32, 23), ("5pt", "32"): (0.35, 25), ("5pt", "16"): (0.39, 27), ("5pt", "8"): (0.46, 32),
    ("5pt", "cin/32"): (0.56, 64), ("5pt", "cin/16"): (0.43, 43), ("5pt", "cin/8"): (0.37, 33),
    ("3pt", "cin"): (0.31, 23), ("3pt", "32"): (0.33, 23), ("3pt", "16"): (0.35, 24), ("3pt", "8"): (0.39, 27),
    ("3pt", "cin/32"): (0.43, 43), ("3pt", "cin/16"): (0.37, 33), ("3pt", "cin/8"): (0.35, 27),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", type=Path, default=Path("results/res18_counts.csv"))
    ap.add_argument("--transition", choices=("branch", "plain"), default="branch")
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()

    rows = []
    for (stencil, rule), (ref_p, ref_m) in REFERENCE.items():
        cfg = table_config("Res18", stencil=stencil, group_rule=rule, transition=args.transition)
        model = LeanResNet(cfg, 10)
        cost = model.cost(args.size, args.size)
        rows.append({
            "stencil": stencil, "groups": rule, "params": cost.params, "mults": cost.mults,
            "params_M": round(cost.params / 1e6, 3), "ref_params_M": ref_p,
            "params_err_%": round(100 * (cost.params / 1e6 - ref_p) / ref_p, 1),
            "mults_M": round(cost.mults / 1e6, 1), "ref_mults_M": ref_m,
            "mults_err_%": round(100 * (cost.mults / 1e6 - ref_m) / ref_m, 1),
        })
    print(rows_to_text(rows))
    args.csv.parent.mkdir(parents=True, exist_ok=True)
    args.csv.write_text(rows_to_csv(rows))
    print(f"\nwrote {args.csv}")


if __name__ == "__main__":
    main()
