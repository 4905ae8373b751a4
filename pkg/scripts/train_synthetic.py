"""Record the synthetic-task baseline: the fixture lean network and a pointwise-only probe.

Writes tests/fixtures/synthetic_baseline.json, which the acceptance tests
rerun and compare against.

    python3 scripts/train_synthetic.py [--out tests/fixtures/synthetic_baseline.json]
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from leanconv.data import make_synthetic
from leanconv.network import NetworkConfig, build_network
from leanconv.network.model import pointwise_probe_config
from leanconv.network.train import TrainConfig, train

FIXTURE = {
    "seed": 0,
    "data": {"n_classes": 4, "n_samples": 512, "size": 16},
    "hyper": {"epochs": 30, "batch_size": 32, "lr": 0.05, "milestones": [[20, 0.01]]},
    "lean": {"stage_widths": [8, 16], "stage_steps": [1, 1], "stage_strides": [1, 2],
             "stencil": "5pt", "group_rule": "cin", "in_channels": 1},
    "probe_width": 16,
}


def run(net_cfg, fixture, dtype=np.float64):
    d = fixture["data"]
    ds = make_synthetic(d["n_classes"], d["n_samples"], d["size"], seed=fixture["seed"], dtype=dtype)
    model = build_network(net_cfg, ds.n_classes, dtype=dtype, seed=fixture["seed"])
    hyper = TrainConfig.from_dict(dict(fixture["hyper"], seed=fixture["seed"]))
    t0 = time.perf_counter()
    trace = train(model, ds, hyper)
    return trace, time.perf_counter() - t0, model.param_count()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("tests/fixtures/synthetic_baseline.json"))
    args = ap.parse_args()

    runs = {}
    for name, cfg in (("lean", NetworkConfig.from_dict(FIXTURE["lean"])),
                      ("probe", pointwise_probe_config(FIXTURE["probe_width"], 1))):
        trace, secs, n_params = run(cfg, FIXTURE)
        runs[name] = {
            "network": cfg.to_dict(),
            "params": n_params,
            "final_val_acc": trace[-1]["val_acc"],
            "best_val_acc": max(r["val_acc"] for r in trace),
            "train_loss": [r["train_loss"] for r in trace],
            "val_acc": [r["val_acc"] for r in trace],
            "seconds": round(secs, 1),
        }
        print(f"{name:>5}: {n_params} params, final val {trace[-1]['val_acc']:.3f}, {secs:.1f}s")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"fixture": FIXTURE, "runs": runs}, indent=1))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
