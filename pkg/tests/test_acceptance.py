"""Acceptance criteria 1-8, one PASS/FAIL line each.

Under pytest the lines are collected into the terminal summary; run the file
directly (``python3 tests/test_acceptance.py``) to print them as they finish.
Criterion 8c only runs when ``LEANCONV_CIFAR_DIR`` points at the CIFAR-10
binary batches.
"""

import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from leanconv.data import load_cifar10, make_synthetic
from leanconv.kernels import PATHS, TileConfig, apply, apply_fused_tiled
from leanconv.kernels.bench import bench_sweep, sweep_shapes
from leanconv.network import LeanResNet, NetworkConfig, build_network, table_config
from leanconv.network.model import pointwise_probe_config
from leanconv.network.train import TrainConfig, train
from leanconv.operators import LeanConvSpec, StencilKind, materialize_dense, nnz_count, param_count
from leanconv.tensor import FeatureMap, Layout
from leanconv.verify import (GROUP_CHOICES, STENCIL_CHOICES, TILE_CHOICES, gradcheck_network, oracle_suite,
                             random_cases, rel_error)

FIXTURE = Path(__file__).parent / "fixtures" / "synthetic_baseline.json"

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # pragma: no cover - run outside the tests directory
    ACCEPTANCE_LINES = []


def report(label, passed, detail):
    line = f"criterion {label}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


# --- 1: dense-oracle equivalence ------------------------------------------------


def check_oracle():
    t0 = time.perf_counter()
    cases = random_cases(240, seed=0, stencils=STENCIL_CHOICES, groups=GROUP_CHOICES,
                         max_batch=4, max_channels=16, max_size=16)
    kinds = {c.spec.stencil for c in cases}
    reports = [oracle_suite(cases, np.float64), oracle_suite(cases, np.float32)]
    secs = time.perf_counter() - t0
    passed = all(r.passed for r in reports) and len(kinds) == 5 and secs < 120
    detail = (f"{len(cases)} cases x {len(PATHS)} paths; max rel err "
              + ", ".join(f"{r.name} {r.worst:.1e} (tol {r.tolerance:.0e})" for r in reports)
              + f"; {secs:.0f}s (limit 120s)")
    return passed, detail


# --- 2: network gradient check --------------------------------------------------

GRADCHECK_NETS = [("9pt", "1"), ("5pt", "cin"), ("5pt", "1"), ("3pt", "cin"), ("1x1", "1")]


def check_network_gradients():
    t0 = time.perf_counter()
    worst, worst_key, retried, dropped, n_tensors = 0.0, "", 0, 0, 0
    for stencil, groups in GRADCHECK_NETS:
        cfg = NetworkConfig([8], [2], [1], stencil, groups)
        stats = {}
        errors = gradcheck_network(cfg, seed=0, batch=4, size=8, stats=stats)
        n_tensors += len(errors)
        retried += stats["retried"]
        dropped += stats["dropped"]
        key = max(errors, key=errors.get)
        if errors[key] > worst:
            worst, worst_key = errors[key], f"{stencil}/{groups} {key}"
    secs = time.perf_counter() - t0
    passed = worst < 1e-5 and secs < 300
    detail = (f"2 blocks x 8 channels, 8x8, step 1e-5, every entry of {n_tensors} tensors over "
              f"{len(GRADCHECK_NETS)} networks; max rel err {worst:.1e} at {worst_key} (tol 1e-5); "
              f"kink retries {retried}, dropped {dropped}; {secs:.0f}s (limit 300s)")
    return passed, detail


# --- 3: exact count formulas ----------------------------------------------------


def truncated_taps(spec, h, w):
    """Stored stencil weights times the pixels where their tap falls in the padding."""
    lost = sum(h * w - max(h - abs(dy), 0) * max(w - abs(dx), 0) for dy, dx in spec.stencil.offsets)
    return spec.c_out * spec.group_in * lost


def check_counts():
    formula = 0
    for c_in in (1, 2, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 256):
        for c_out in (c_in, 2 * c_in):
            for g in (d for d in range(1, c_in + 1) if c_in % d == 0 and c_out % d == 0):
                five = param_count(LeanConvSpec.zeros(c_in, c_out, g, "5pt"))
                assert five * g == (g + 4) * c_in * c_out, (c_in, c_out, g)
                formula += 1
            assert param_count(LeanConvSpec.zeros(c_in, c_out, 1, "9pt")) == 9 * c_in * c_out
            formula += 1
    rng = np.random.default_rng(3)
    structural = 0
    for kind in StencilKind:
        for c, g in ((4, 1), (4, 2), (4, 4), (6, 3)):
            for h, w in ((1, 1), (2, 5), (6, 6), (7, 4)):
                spec = LeanConvSpec.random(c, c, g, kind, rng)
                nnz = int(np.count_nonzero(materialize_dense(spec, h, w)))
                expected = param_count(spec) * h * w - truncated_taps(spec, h, w)
                if not nnz == nnz_count(spec, h, w) == expected:
                    return False, f"{kind.value} c={c} g={g} {h}x{w}: nnz {nnz} vs formula {expected}"
                structural += 1
    return True, (f"{formula} (c_in, c_out, g) formula checks exact; {structural} operators: "
                  f"nonzeros = param_count*H*W - padded taps = nnz_count, exact")


# --- 4: architecture-scale accounting -------------------------------------------


def check_res18():
    t0 = time.perf_counter()
    costs = {s: LeanResNet(table_config("Res18", s), 10).cost(32, 32) for s in ("9pt", "5pt", "3pt")}
    secs = time.perf_counter() - t0
    full = LeanResNet(table_config("Res18", "9pt"), 10)
    rows = full.cost_table(32, 32)
    conv_only = sum(r["params"] for r in rows if r["kind"] == "conv")
    no_norm = sum(r["params"] for r in rows if r["kind"] != "norm")
    p9 = costs["9pt"].params
    dev = (p9 - 2.7e6) / 2.7e6
    ordered = (costs["9pt"].params > costs["5pt"].params > costs["3pt"].params
               and costs["9pt"].mults > costs["5pt"].mults > costs["3pt"].mults)
    passed = abs(dev) <= 0.02 and ordered and secs < 1
    detail = (f"Res18/9pt total params {p9:,} = {100 * dev:+.3f}% vs 2.7M (limit 2%); "
              f"ordering 9pt>5pt>3pt {'holds' if ordered else 'BROKEN'}: params "
              + " > ".join(f"{costs[s].params:,}" for s in costs) + ", mults "
              + " > ".join(f"{costs[s].mults:,}" for s in costs)
              + f"; without norm affine {no_norm:,} ({100 * (no_norm - 2.7e6) / 2.7e6:+.2f}%), "
              f"convolutions alone {conv_only:,} ({100 * (conv_only - 2.7e6) / 2.7e6:+.2f}%); {secs:.2f}s")
    return passed, detail


# --- 5: separable composition ---------------------------------------------------


def depthwise_three(taps, stencil):
    c = taps.shape[0]
    spec = LeanConvSpec.zeros(c, c, c, stencil, coupling="grouped")
    return spec.replace(pointwise=taps[:, 1:2].copy(), spatial=taps[:, None, [0, 2]].copy())


def separable_oracle(h_taps, v_taps, x):
    b, c, hh, ww = x.shape
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for ch in range(c):
        k = np.outer(v_taps[ch], h_taps[ch])
        for dy in range(3):
            for dx in range(3):
                out[:, ch] += k[dy, dx] * pad[:, ch, dy:dy + hh, dx:dx + ww]
    return out


def check_separable():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst, n = 0.0, 0
    for k in range(100):
        b, c = int(rng.integers(1, 5)), int(rng.integers(1, 17))
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        h_taps, v_taps = rng.standard_normal((c, 3)), rng.standard_normal((c, 3))
        x = FeatureMap.from_array(rng.standard_normal((b, c, h, w)), Layout.WIDTH_FASTEST)
        tiles = TILE_CHOICES[k % len(TILE_CHOICES)]
        mid = apply_fused_tiled(depthwise_three(h_taps, "3pt-h"), x, tiles)
        out = apply_fused_tiled(depthwise_three(v_taps, "3pt-v"), mid, tiles)
        if mid.layout is not Layout.HEIGHT_FASTEST or out.layout is not x.layout:
            return False, f"layout not restored for case {k}"
        worst = max(worst, rel_error(out.logical(), separable_oracle(h_taps, v_taps, x.logical())))
        n += 1
    secs = time.perf_counter() - t0
    passed = worst < 1e-10 and secs < 30
    return passed, (f"{n} horizontal-then-vertical pairs vs explicit 3x3 outer product: max rel err "
                    f"{worst:.1e} (tol 1e-10); layout restored every time; {secs:.1f}s (limit 30s)")


# --- 6: derivative span ---------------------------------------------------------


def five_taps(center, up=0.0, left=0.0, right=0.0, down=0.0):
    spec = LeanConvSpec.zeros(1, 1, 1, "5pt")
    return spec.replace(pointwise=np.array([[center]]), spatial=np.array([[[up, left, right, down]]]))


def check_derivative_span():
    yy, xx = np.mgrid[0:9, 0:11].astype(np.float64)
    cases = [
        ("d/dx ramp", five_taps(0.0, left=-0.5, right=0.5), xx, 1.0),
        ("d2/dx2 parabola", five_taps(-2.0, left=1.0, right=1.0), xx ** 2, 2.0),
        ("d/dy ramp", five_taps(0.0, up=-0.5, down=0.5), yy, 1.0),
        ("d2/dy2 parabola", five_taps(-2.0, up=1.0, down=1.0), yy ** 2, 2.0),
    ]
    worst = 0.0
    for _, spec, image, value in cases:
        for layout in (Layout.WIDTH_FASTEST, Layout.HEIGHT_FASTEST):
            x = FeatureMap.from_array(image[None, None], layout)
            for path in PATHS:
                out = apply(spec, x, path=path, cfg=TileConfig(16, 1, 1)).logical()[0, 0, 1:-1, 1:-1]
                worst = max(worst, float(np.max(np.abs(out - value))))
    passed = worst < 1e-12
    return passed, (f"{len(cases)} derivative stencils x 2 layouts x {len(PATHS)} paths at interior pixels: "
                    f"max abs err {worst:.1e} (tol 1e-12)")


# --- 7: fused-kernel performance ordering ---------------------------------------


def check_fused_ordering():
    t0 = time.perf_counter()
    rows = bench_sweep(sweep_shapes(), stencil="5pt", batch=1, repeats=7, dtype=np.float32, baseline=False)
    secs = time.perf_counter() - t0
    wins = sum(r["fused_le_separate"] for r in rows)
    passed = wins >= 4 and secs < 600
    points = ", ".join(f"{r['channels']}ch/{r['size']}: {r['fused_s'] / r['separate_s']:.2f}" for r in rows)
    return passed, (f"fused <= separate at {wins}/6 sweep points (need 4); fused/separate latency {points}; "
                    f"float32, batch 1, {os.cpu_count()} cpu; {secs:.0f}s (limit 600s)")


# --- 8: desk-scale learning -----------------------------------------------------

OVERFIT_STENCILS = ("9pt", "5pt", "3pt", "1x1")
OVERFIT_GROUPS = ("1", "cin/2", "cin")


def epochs_to_fit(stencil, groups, max_epochs=200):
    ds = make_synthetic(4, 64, 16, seed=1).subset(16, 16)
    cfg = NetworkConfig([8, 16], [1, 1], [1, 2], stencil, groups, in_channels=1)
    trace = train(build_network(cfg, 4, seed=0), ds,
                  TrainConfig(epochs=max_epochs, batch_size=16, lr=0.05, seed=0),
                  on_epoch=lambda r: r["train_acc"] == 1.0)
    return trace[-1]["epoch"] if trace[-1]["train_acc"] == 1.0 else None


def check_overfit():
    epochs = {(s, g): epochs_to_fit(s, g) for s in OVERFIT_STENCILS for g in OVERFIT_GROUPS}
    failed = [k for k, v in epochs.items() if v is None]
    fitted = [v for v in epochs.values() if v is not None]
    detail = (f"{len(epochs) - len(failed)}/{len(epochs)} stencil x group configs reach 100% train accuracy "
              f"on 16 samples within 200 epochs (slowest: {max(fitted) if fitted else '-'} epochs)")
    if failed:
        detail += f"; not fitted: {failed}"
    return not failed, detail


def run_fixture(net_cfg, fixture):
    d, hyper = fixture["data"], fixture["hyper"]
    ds = make_synthetic(d["n_classes"], d["n_samples"], d["size"], seed=fixture["seed"])
    model = build_network(net_cfg, ds.n_classes, seed=fixture["seed"])
    return train(model, ds, TrainConfig.from_dict(dict(hyper, seed=fixture["seed"])))


def check_synthetic():
    baseline = json.loads(FIXTURE.read_text())
    fixture = baseline["fixture"]
    lean = run_fixture(NetworkConfig.from_dict(fixture["lean"]), fixture)
    probe = run_fixture(pointwise_probe_config(fixture["probe_width"], 1), fixture)
    lean_acc, probe_acc = lean[-1]["val_acc"], probe[-1]["val_acc"]
    recorded = baseline["runs"]["lean"]["final_val_acc"]
    passed = (len(lean) <= 30 and lean_acc >= 0.95 and probe_acc < 0.60 and abs(lean_acc - recorded) <= 0.02)
    return passed, (f"lean fixture network val acc {lean_acc:.3f} after {len(lean)} epochs (need >= 0.95, "
                    f"recorded {recorded:.3f} +- 0.02); pointwise-only probe {probe_acc:.3f} (need < 0.60)")


def check_cifar(directory, epochs):
    ds = load_cifar10(directory, subset=5000)
    hyper = TrainConfig(epochs=epochs, batch_size=64, lr=0.05, augment=True,
                        milestones=[[int(epochs * 0.5), 0.01], [int(epochs * 0.75), 0.001]])
    acc = {}
    for stencil, groups in (("5pt", "16"), ("9pt", "1")):
        model = build_network(table_config("Res18", stencil, groups), 10, dtype=np.float32, seed=0)
        acc[stencil] = train(model, ds, hyper)[-1]["val_acc"]
    gap = acc["9pt"] - acc["5pt"]
    return gap <= 0.03, (f"Res18 on 5000 CIFAR-10 images, {epochs} epochs: 5pt g=16 {acc['5pt']:.3f}, "
                         f"9pt {acc['9pt']:.3f}, gap {100 * gap:.1f} points (limit 3)")


# --- pytest entry points --------------------------------------------------------


def _run(label, check):
    passed, detail = check()
    report(label, passed, detail)
    assert passed, detail


def test_criterion_1_oracle_equivalence():
    _run("1", check_oracle)


def test_criterion_2_network_gradients():
    _run("2", check_network_gradients)


def test_criterion_3_count_formulas():
    _run("3", check_counts)


def test_criterion_4_res18_accounting():
    _run("4", check_res18)


def test_criterion_5_separable_composition():
    _run("5", check_separable)


def test_criterion_6_derivative_span():
    _run("6", check_derivative_span)


def test_criterion_7_fused_ordering():
    _run("7", check_fused_ordering)


def test_criterion_8a_overfit():
    _run("8a", check_overfit)


def test_criterion_8b_synthetic_task():
    _run("8b", check_synthetic)


def test_criterion_8c_cifar_subset():
    directory = os.environ.get("LEANCONV_CIFAR_DIR")
    if not directory:
        ACCEPTANCE_LINES.append("criterion 8c: SKIP | optional; set LEANCONV_CIFAR_DIR to run the CIFAR-10 subset comparison")
        pytest.skip("LEANCONV_CIFAR_DIR not set")
    epochs = int(os.environ.get("LEANCONV_CIFAR_EPOCHS", "30"))
    _run("8c", lambda: check_cifar(directory, epochs))


if __name__ == "__main__":
    checks = [("1", check_oracle), ("2", check_network_gradients), ("3", check_counts), ("4", check_res18),
              ("5", check_separable), ("6", check_derivative_span), ("7", check_fused_ordering),
              ("8a", check_overfit), ("8b", check_synthetic)]
    results = [report(label, *check()) for label, check in checks]
    sys.exit(0 if all(results) else 1)
