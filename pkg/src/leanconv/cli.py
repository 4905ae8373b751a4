"""``leanconv`` command line: verify, count, bench, train, synth.

Configuration is layered: built-in per-command defaults, then an optional
JSON file (``--config``), then explicit flags. The merged result is what gets
hashed into every result record.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from pathlib import Path

# exit status bits for verify; 1 and 2 stay free for Python and argparse errors
EXIT_ORACLE = 16
EXIT_ADJOINT = 32
EXIT_GRADIENT = 64
EXIT_DIVERGED = 3
EXIT_DATA = 4

STENCIL_FLAGS = ("9pt", "5pt", "3pt", "1x1")

DEFAULTS = {
    "verify": {
        "cases": 200,
        "stencils": ["9pt", "5pt", "3pt-h", "3pt-v", "1x1"],
        "groups": ["1", "8", "cin"],
        "max_channels": 16,
        "max_size": 16,
        "perturb": 0.0,
        "network_gradients": True,
    },
    "count": {
        "table": "Res18",
        "size": 32,
        "batch": 1,
        "classes": 10,
    },
    "bench": {
        "channels": 16,
        "size": 512,
        "points": 6,
        "batch": 1,
        "repeats": 5,
        "stencil": "5pt",
        "baseline": True,
    },
    "train": {
        "data": {"kind": "synthetic", "path": None, "subset": None, "n_classes": 4,
                 "n_samples": 512, "size": 16},
        "hyper": {"epochs": 30, "batch_size": 32, "lr": 0.05, "milestones": [[20, 0.01]]},
    },
    "synth": {
        "data": {"n_classes": 4, "n_samples": 512, "size": 16, "channels": 1},
    },
}

NETWORK_DEFAULTS = {
    "count": {"stencil": "9pt", "group_rule": "1", "transition": "branch", "in_channels": 3},
    "train": {"stage_widths": [8, 16], "stage_steps": [1, 1], "stage_strides": [1, 2],
              "stencil": "5pt", "group_rule": "cin", "transition": "branch"},
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set(cfg: dict, dotted: str, value) -> None:
    node = cfg
    *head, last = dotted.split(".")
    for k in head:
        node = node.setdefault(k, {})
    node[last] = value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with defaults for this command")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--out", type=Path, help="output directory (default: results)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="leanconv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="oracle, adjoint and gradient suites")
    v.add_argument("--stencil", choices=STENCIL_FLAGS)
    v.add_argument("--groups", help="N | cin | cin/N | ratio:R")
    v.add_argument("--cases", type=int)
    v.add_argument("--perturb", type=float, help="shift one weight by this much before the kernel paths run")
    v.add_argument("--no-network", action="store_true", help="skip the network gradient check")

    c = sub.add_parser("count", parents=[common], help="per-layer parameter and multiplication table")
    c.add_argument("--table", help="network from the width/depth table, e.g. Res18")
    c.add_argument("--stencil", choices=STENCIL_FLAGS)
    c.add_argument("--groups", help="N | cin | cin/N | ratio:R")
    c.add_argument("--transition", choices=("branch", "plain"))
    c.add_argument("--size", type=int, help="input height and width")
    c.add_argument("--batch", type=int)

    b = sub.add_parser("bench", parents=[common], help="fused vs separate kernel timings")
    b.add_argument("--stencil", choices=STENCIL_FLAGS)
    b.add_argument("--channels", type=int, help="channels at the first sweep point")
    b.add_argument("--size", type=int, help="map size at the first sweep point")
    b.add_argument("--points", type=int)
    b.add_argument("--batch", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--no-baseline", action="store_true", help="skip the fully-coupled 3x3 timing")

    t = sub.add_parser("train", parents=[common], help="train a network and save trace + checkpoint")
    t.add_argument("--data", help="'synthetic', 'cifar10:DIR' or a dataset .npz from 'synth'")
    t.add_argument("--stencil", choices=STENCIL_FLAGS)
    t.add_argument("--groups", help="N | cin | cin/N | ratio:R")
    t.add_argument("--subset", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--augment", action="store_true")

    s = sub.add_parser("synth", parents=[common], help="write the synthetic dataset to an .npz")
    s.add_argument("--classes", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--size", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = {"seed": 0, "precision": "f64", "threads": os.cpu_count() or 1, "out": "results"}
    cfg = deep_merge(cfg, DEFAULTS[cmd])
    if cmd in NETWORK_DEFAULTS:
        cfg["network"] = dict(NETWORK_DEFAULTS[cmd])
    if args.config is not None:
        cfg = deep_merge(cfg, json.loads(Path(args.config).read_text()))

    flags = {"seed": "seed", "precision": "precision", "threads": "threads", "out": "out"}
    for name, key in flags.items():
        val = getattr(args, name, None)
        if val is not None:
            _set(cfg, key, str(val) if isinstance(val, Path) else val)

    stencil = getattr(args, "stencil", None)
    groups = getattr(args, "groups", None)
    if cmd == "verify":
        if stencil is not None:
            cfg["stencils"] = ["3pt-h", "3pt-v"] if stencil == "3pt" else [stencil]
        if groups is not None:
            cfg["groups"] = [groups]
        if args.cases is not None:
            cfg["cases"] = args.cases
        if args.perturb is not None:
            cfg["perturb"] = args.perturb
        if args.no_network:
            cfg["network_gradients"] = False
    elif cmd == "count":
        if stencil is not None:
            cfg["network"]["stencil"] = stencil
        if groups is not None:
            cfg["network"]["group_rule"] = groups
        if args.transition is not None:
            cfg["network"]["transition"] = args.transition
        for name in ("table", "size", "batch"):
            if getattr(args, name) is not None:
                cfg[name] = getattr(args, name)
    elif cmd == "bench":
        if stencil is not None:
            cfg["stencil"] = stencil
        for name in ("channels", "size", "points", "batch", "repeats"):
            if getattr(args, name) is not None:
                cfg[name] = getattr(args, name)
        if args.no_baseline:
            cfg["baseline"] = False
    elif cmd == "train":
        if stencil is not None:
            cfg["network"]["stencil"] = stencil
        if groups is not None:
            cfg["network"]["group_rule"] = groups
        if args.data is not None:
            if args.data == "synthetic":
                cfg["data"]["kind"] = "synthetic"
            elif args.data.startswith("cifar10:"):
                cfg["data"].update(kind="cifar10", path=args.data[len("cifar10:"):])
            else:
                cfg["data"].update(kind="npz", path=args.data)
        if args.subset is not None:
            cfg["data"]["subset"] = args.subset
        for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "lr")):
            if getattr(args, flag) is not None:
                cfg["hyper"][key] = getattr(args, flag)
        if args.augment:
            cfg["hyper"]["augment"] = True
    elif cmd == "synth":
        for flag, key in (("classes", "n_classes"), ("samples", "n_samples"), ("size", "size")):
            if getattr(args, flag) is not None:
                cfg["data"][key] = getattr(args, flag)
    return cfg


def _pin_threads(n: int) -> None:
    # must run before numpy / numba load their thread pools
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _dtype(cfg):
    import numpy as np

    return np.float32 if cfg["precision"] == "f32" else np.float64


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# --- commands -----------------------------------------------------------


def cmd_verify(cfg: dict) -> tuple:
    import numpy as np

    from .network.model import NetworkConfig
    from .verify import (adjoint_suite, kernel_gradient_suite, network_gradient_suite, oracle_suite,
                         random_cases)

    cases = random_cases(cfg["cases"], seed=cfg["seed"], stencils=cfg["stencils"], groups=cfg["groups"],
                         max_channels=cfg["max_channels"], max_size=cfg["max_size"])
    suites = [
        ("oracle", oracle_suite(cases, np.float64, perturb=cfg["perturb"])),
        ("oracle", oracle_suite(cases, np.float32, perturb=cfg["perturb"])),
        ("adjoint", adjoint_suite(cases, seed=cfg["seed"] + 1)),
        ("gradient", kernel_gradient_suite(cases, seed=cfg["seed"] + 2)),
    ]
    if cfg["network_gradients"]:
        kinds = list(dict.fromkeys(s.split("-")[0] for s in cfg["stencils"]))
        nets = [NetworkConfig([8], [2], [1], k, "1") for k in kinds]
        suites.append(("gradient", network_gradient_suite(nets, seed=cfg["seed"])))

    code = 0
    rows = []
    for category, rep in suites:
        row = rep.summary()
        row["category"] = category
        rows.append(row)
        status = "ok" if rep.passed else "FAIL"
        print(f"{rep.name:<18} {rep.n_checks:>6} checks  max rel error {rep.worst:.3e}  "
              f"(tol {rep.tolerance:.0e})  {status}")
        if not rep.passed:
            code |= {"oracle": EXIT_ORACLE, "adjoint": EXIT_ADJOINT, "gradient": EXIT_GRADIENT}[category]
            for label, err in rep.failures[:3]:
                print(f"    {err:.3e}  {label}")
    return rows, {"exit_code": code, "passed": code == 0}, code


def count_model(cfg: dict):
    from .network.model import LeanResNet, NetworkConfig, table_config

    net = cfg["network"]
    if cfg.get("table"):
        ncfg = table_config(cfg["table"], stencil=net["stencil"], group_rule=net["group_rule"],
                            transition=net.get("transition", "branch"),
                            in_channels=net.get("in_channels", 3))
    else:
        ncfg = NetworkConfig.from_dict(net)
    ncfg.validate()
    return LeanResNet(ncfg, cfg["classes"], dtype=_dtype(cfg))


COUNT_COLUMNS = ["layer", "kind", "stencil", "coupling", "c_in", "c_out", "groups", "height", "width",
                 "params", "mults"]


def cmd_count(cfg: dict) -> tuple:
    from .records import rows_to_csv, rows_to_text

    model = count_model(cfg)
    rows = model.cost_table(cfg["size"], cfg["size"], cfg["batch"])
    total = {"layer": "TOTAL", "params": sum(r["params"] for r in rows), "mults": sum(r["mults"] for r in rows)}
    table = rows + [total]
    print(rows_to_text(table, COUNT_COLUMNS))
    name = f"count_{cfg.get('table') or 'network'}_{cfg['network']['stencil']}".replace("/", "-")
    csv_path = _write_text(Path(cfg["out"]) / f"{name}.csv", rows_to_csv(table, COUNT_COLUMNS))
    print(f"\ntotal params {total['params']:,}  mults {total['mults']:,}  ({model.conv_layer_count()} conv layers)")
    print(f"wrote {csv_path}")
    summary = {"params": total["params"], "mults": total["mults"], "conv_layers": model.conv_layer_count(),
               "csv": str(csv_path)}
    return rows, summary, 0


BENCH_COLUMNS = ["channels", "size", "batch", "stencil", "baseline_s", "separate_s", "fused_s",
                 "rel_baseline", "rel_separate", "rel_fused", "tile", "fused_le_separate"]


def cmd_bench(cfg: dict) -> tuple:
    from .kernels.bench import bench_sweep, sweep_shapes
    from .records import rows_to_csv, rows_to_text

    stencil = "3pt-h" if cfg["stencil"] == "3pt" else cfg["stencil"]
    shapes = sweep_shapes(cfg["channels"], cfg["size"], cfg["points"])
    rows = bench_sweep(shapes, stencil=stencil, batch=cfg["batch"], repeats=cfg["repeats"], dtype=_dtype(cfg),
                       seed=cfg["seed"], threads=cfg["threads"], baseline=cfg["baseline"])
    cols = [c for c in BENCH_COLUMNS if c in rows[0]]
    print(rows_to_text(rows, cols))
    csv_path = _write_text(Path(cfg["out"]) / "bench.csv", rows_to_csv(rows, cols))
    wins = sum(r["fused_le_separate"] for r in rows)
    print(f"\nfused <= separate at {wins} of {len(rows)} points; wrote {csv_path}")
    return rows, {"fused_wins": wins, "points": len(rows), "csv": str(csv_path)}, 0


def load_training_data(cfg: dict):
    from .data import load_cifar10, load_dataset, make_synthetic

    d = cfg["data"]
    dtype = _dtype(cfg)
    if d["kind"] == "synthetic":
        ds = make_synthetic(d["n_classes"], d["n_samples"], d["size"], seed=cfg["seed"], dtype=dtype)
    elif d["kind"] == "cifar10":
        ds = load_cifar10(d["path"], subset=d.get("subset"), dtype=dtype)
    elif d["kind"] == "npz":
        ds = load_dataset(d["path"], dtype=dtype)
    else:
        raise ValueError(f"unknown data kind {d['kind']!r}")
    if d.get("subset") is not None and d["kind"] != "cifar10":
        ds = ds.subset(d["subset"])
    return ds


TRACE_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]


def cmd_train(cfg: dict) -> tuple:
    import csv

    from .network.checkpoint import save_checkpoint
    from .network.model import NetworkConfig, build_network
    from .network.train import TrainConfig, train

    try:
        ds = load_training_data(cfg)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return [], {"error": str(exc)}, EXIT_DATA
    net = dict(cfg["network"], in_channels=int(ds.image_shape[0]))
    ncfg = NetworkConfig.from_dict(net)
    ncfg.validate()
    model = build_network(ncfg, ds.n_classes, dtype=_dtype(cfg), seed=cfg["seed"])
    hyper = TrainConfig.from_dict(dict(cfg["hyper"], seed=cfg["seed"]))

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.csv"
    with open(trace_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        fh.flush()

        def on_epoch(rec):
            writer.writerow(rec)
            fh.flush()
            print(f"epoch {rec['epoch']:>3}  lr {rec['lr']:.4g}  loss {rec['train_loss']:.4f}  "
                  f"train {rec['train_acc']:.3f}  val {rec['val_acc']:.3f}", flush=True)

        from .network.train import TrainingDiverged

        try:
            trace = train(model, ds, hyper, on_epoch=on_epoch)
        except TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return [], {"error": str(exc), "trace": str(trace_path)}, EXIT_DIVERGED
    ckpt = save_checkpoint(model, out / "checkpoint.npz", extra={"epochs": len(trace)})
    final = trace[-1]["val_acc"] if trace else None
    if final is not None:
        print(f"final val accuracy {final:.4f}")
    else:
        print("no epochs run; wrote initial checkpoint")
    summary = {"final_val_acc": final, "params": model.param_count(), "trace": str(trace_path),
               "checkpoint": str(ckpt)}
    return trace, summary, 0


def cmd_synth(cfg: dict) -> tuple:
    from .data import make_synthetic, save_dataset

    d = cfg["data"]
    ds = make_synthetic(d["n_classes"], d["n_samples"], d["size"], seed=cfg["seed"], channels=d["channels"],
                        dtype=_dtype(cfg))
    path = save_dataset(ds, Path(cfg["out"]) / "synthetic.npz")
    print(f"wrote {path}: {len(ds.y_train)} train / {len(ds.y_val)} val images of shape {ds.image_shape}")
    return [], {"path": str(path), "n_train": len(ds.y_train), "n_val": len(ds.y_val)}, 0


COMMANDS = {"verify": cmd_verify, "count": cmd_count, "bench": cmd_bench, "train": cmd_train, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: bad --config: {exc}", file=sys.stderr)
        return 2
    _pin_threads(cfg["threads"])

    import logging

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .records import ResultRecord

    t0 = time.perf_counter()
    rows, summary, code = COMMANDS[args.command](cfg)
    record = ResultRecord(command=args.command, config=cfg, rows=rows, summary=summary,
                          wall_clock_s=time.perf_counter() - t0)
    path = record.write(Path(cfg["out"]) / f"{args.command}.json")
    print(f"record {path} (config {record.config_hash})")
    return code


if __name__ == "__main__":
    sys.exit(main())
