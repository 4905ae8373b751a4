"""Epochs needed to fit 16 samples exactly, for every stencil x group setting.

    python3 scripts/overfit_check.py [--max-epochs 200]
"""

import argparse

from leanconv.data import make_synthetic
from leanconv.network import NetworkConfig, build_network
from leanconv.network.train import TrainConfig, train

STENCILS = ("9pt", "5pt", "3pt", "1x1")
GROUPS = ("1", "cin/2", "cin")


def epochs_to_fit(stencil, groups, max_epochs, seed=0):
    ds = make_synthetic(4, 64, 16, seed=1).subset(16, 16)
    model = build_network(NetworkConfig([8, 16], [1, 1], [1, 2], stencil, groups, in_channels=1), 4, seed=seed)
    trace = train(model, ds, TrainConfig(epochs=max_epochs, batch_size=16, lr=0.05, seed=seed),
                  on_epoch=lambda r: r["train_acc"] == 1.0)
    return trace[-1]["epoch"] if trace[-1]["train_acc"] == 1.0 else None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-epochs", type=int, default=200)
    args = ap.parse_args()
    for st in STENCILS:
        for g in GROUPS:
            n = epochs_to_fit(st, g, args.max_epochs)
            print(f"{st:>4} g={g:<6} {'not fitted' if n is None else f'100% at epoch {n}'}")


if __name__ == "__main__":
    main()
