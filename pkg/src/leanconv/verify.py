"""Randomized correctness suites: dense-oracle equivalence, adjoint and gradients.

Each suite returns a :class:`SuiteReport` with the worst relative error seen
and a pass flag against its tolerance. The CLI ``verify`` command and the test
suite both run these.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .kernels import PATHS, TileConfig, apply, apply_transpose, backward
from .operators import LeanConvSpec, StencilKind, choose_groups, materialize_dense
from .tensor import FeatureMap, Layout

# tolerances per precision, relative to the largest reference magnitude
TOLERANCE = {"float64": 1e-10, "float32": 1e-4}
GRADIENT_STEP = 1e-5
NETWORK_GRAD_TOL = 1e-5

STENCIL_CHOICES = ("9pt", "5pt", "3pt-h", "3pt-v", "1x1")
GROUP_CHOICES = ("1", "4", "8", "cin")
# small tiles so the fused path crosses several tile boundaries on every case
TILE_CHOICES = (TileConfig(16, 4, 4), TileConfig(64, 8, 16), TileConfig(7, 3, 5))


@dataclass
class Case:
    spec: LeanConvSpec
    x: FeatureMap
    tiles: TileConfig

    def describe(self) -> str:
        s = self.spec
        return (f"{s.stencil.value} g={s.groups} {s.coupling} c_in={s.c_in} c_out={s.c_out} "
                f"x={self.x.shape} {self.x.layout.name}")


@dataclass
class SuiteReport:
    name: str
    tolerance: float
    n_checks: int = 0
    worst: float = 0.0
    worst_case: str = ""
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checks > 0 and not self.failures

    def record(self, err: float, label: str) -> None:
        self.n_checks += 1
        if not np.isfinite(err) or err > self.worst:
            self.worst = float(err)
            self.worst_case = label
        if not np.isfinite(err) or err >= self.tolerance:
            self.failures.append((label, float(err)))

    def summary(self) -> dict:
        return {"suite": self.name, "checks": self.n_checks, "max_rel_error": self.worst,
                "tolerance": self.tolerance, "passed": self.passed, "worst_case": self.worst_case}


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    """Largest absolute deviation over the largest reference magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.max(np.abs(want), initial=0.0)), 1e-300)
    return float(np.max(np.abs(got - want), initial=0.0)) / scale


def draw_groups(choice: str, rng: np.random.Generator, max_channels: int, stencil: StencilKind) -> tuple:
    """``(c_in, g)`` for a group rule: ``N``, ``cin``, ``cin/N`` or ``ratio:R``."""
    choice = str(choice)
    if choice == "cin":
        c_in = int(rng.choice([c for c in (1, 2, 4, 8, 16) if c <= max_channels]))
        return c_in, c_in
    if choice.startswith("cin/"):
        size = min(int(choice[4:]), max_channels)
        g = int(rng.integers(1, max_channels // size + 1))
        return g * size, g
    if choice.startswith("ratio:"):
        c_in = int(rng.integers(1, max_channels + 1))
        return c_in, choose_groups(c_in, stencil.points, float(choice[6:]))
    g = min(int(choice), max_channels)
    return g * int(rng.integers(1, max_channels // g + 1)), g


def random_cases(n: int, seed: int = 0, stencils: Iterable[str] = STENCIL_CHOICES,
                 groups: Iterable[str] = GROUP_CHOICES, max_batch: int = 4, max_channels: int = 16,
                 max_size: int = 16) -> list:
    """Seeded cases cycling through every stencil x group pairing.

    Channel counts are multiples of the group count; 3-point stencils get the
    layout their direction requires on the fused path, others a random one.
    """
    rng = np.random.default_rng(seed)
    stencils = [StencilKind.parse(s) for s in stencils]
    groups = list(groups)
    combos = [(s, g) for s in stencils for g in groups]
    cases = []
    for k in range(n):
        stencil, gchoice = combos[k % len(combos)]
        c_in, g = draw_groups(gchoice, rng, max_channels, stencil)
        c_out = g * int(rng.integers(1, max_channels // g + 1))
        coupling = "grouped" if rng.random() < 0.2 else "lean"
        spec = LeanConvSpec.random(c_in, c_out, g, stencil, rng, coupling=coupling)
        b = int(rng.integers(1, max_batch + 1))
        h = int(rng.integers(1, max_size + 1))
        w = int(rng.integers(1, max_size + 1))
        if stencil.direction == "horizontal":
            layout = Layout.WIDTH_FASTEST
        elif stencil.direction == "vertical":
            layout = Layout.HEIGHT_FASTEST
        else:
            layout = Layout.WIDTH_FASTEST if rng.random() < 0.5 else Layout.HEIGHT_FASTEST
        x = FeatureMap.from_array(rng.standard_normal((b, c_in, h, w)), layout=layout)
        cases.append(Case(spec, x, TILE_CHOICES[k % len(TILE_CHOICES)]))
    return cases


def dense_apply(mat: np.ndarray, x: np.ndarray, c_out: int) -> np.ndarray:
    b, _, h, w = x.shape
    return (x.reshape(b, -1) @ mat.T).reshape(b, c_out, h, w)


def perturbed(spec: LeanConvSpec, amount: float) -> LeanConvSpec:
    """A copy with one pointwise weight shifted; used to prove the suites can fail."""
    if not amount:
        return spec
    pw = spec.pointwise.copy()
    pw.flat[0] += amount
    return spec.replace(pointwise=pw)


def oracle_suite(cases: list, dtype=np.float64, paths=PATHS, perturb: float = 0.0) -> SuiteReport:
    """Every path against the materialized dense operator."""
    dtype = np.dtype(dtype)
    report = SuiteReport(f"oracle[{dtype.name}]", TOLERANCE[dtype.name])
    for case in cases:
        s, x = case.spec, case.x
        want = dense_apply(materialize_dense(s, x.height, x.width), x.logical(), s.c_out)
        spec = perturbed(s, perturb).astype(dtype)
        xin = x.astype(dtype)
        for path in paths:
            y = apply(spec, xin, path=path, cfg=case.tiles)
            if y.dtype != dtype:
                raise AssertionError(f"{path} returned {y.dtype} for {dtype} input")
            report.record(rel_error(y.logical(), want), f"{path}: {case.describe()}")
    return report


def adjoint_suite(cases: list, seed: int = 1) -> SuiteReport:
    """``<K x, u> == <x, K^T u>`` and the transpose against the dense transpose."""
    rng = np.random.default_rng(seed)
    report = SuiteReport("adjoint", TOLERANCE["float64"])
    for case in cases:
        s, x = case.spec, case.x
        u = FeatureMap.from_array(rng.standard_normal((x.batch, s.c_out, x.height, x.width)), x.layout)
        kx = apply(s, x, path="reference").logical()
        ktu = apply_transpose(s, u).logical()
        lhs = float(np.sum(kx * u.logical()))
        rhs = float(np.sum(x.logical() * ktu))
        scale = max(float(np.sum(np.abs(kx * u.logical()))), 1e-300)
        report.record(abs(lhs - rhs) / scale, f"inner product: {case.describe()}")
        mat = materialize_dense(s, x.height, x.width)
        b = x.batch
        want = (u.logical().reshape(b, -1) @ mat).reshape(x.logical().shape)
        report.record(rel_error(ktu, want), f"transpose: {case.describe()}")
    return report


def kernel_gradient_suite(cases: list, seed: int = 2, probes: int = 4,
                          step: float = GRADIENT_STEP) -> SuiteReport:
    """Weight gradients of ``L(w) = <K_w x, u>`` against central differences.

    The loss is linear in the weights, so central differences are exact up
    to rounding and the comparison can use the tight 64-bit tolerance scaled
    by the step.
    """
    rng = np.random.default_rng(seed)
    report = SuiteReport("kernel-gradient", 1e-7)
    for case in cases:
        s, x = case.spec, case.x
        u = FeatureMap.from_array(rng.standard_normal((x.batch, s.c_out, x.height, x.width)), x.layout)
        grads = backward(s, x, u)
        ul = u.logical()

        def loss(spec):
            return float(np.sum(apply(spec, x, path="reference").logical() * ul))

        for field_name, analytic in (("pointwise", grads.d_pointwise), ("spatial", grads.d_spatial)):
            w = getattr(s, field_name)
            if w.size == 0:
                continue
            scale = max(float(np.max(np.abs(analytic))), 1.0)
            for flat in rng.choice(w.size, size=min(probes, w.size), replace=False):
                plus, minus = w.copy(), w.copy()
                plus.flat[flat] += step
                minus.flat[flat] -= step
                num = (loss(s.replace(**{field_name: plus})) - loss(s.replace(**{field_name: minus}))) / (2 * step)
                report.record(abs(num - analytic.flat[flat]) / scale, f"{field_name}[{flat}]: {case.describe()}")
    return report


def _relu_state(model) -> bytes:
    return b"".join(np.packbits(r._mask).tobytes() for blk in model.blocks() for r in (blk.relu1, blk.relu2))


def network_gradcheck(model, images: np.ndarray, labels: np.ndarray, step: float = GRADIENT_STEP,
                      max_entries: Optional[int] = None, seed: int = 0, stats: Optional[dict] = None) -> dict:
    """Central-difference check of every parameter tensor of a network.

    Returns ``{param_key: relative error}`` where the error of a tensor is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over the
    probed entries. ``max_entries`` caps probes per tensor (random subset).

    A probe whose +-step moves any ReLU input across zero straddles a kink,
    where the difference quotient is not a derivative. Such entries are
    retried at ``step / 100`` and dropped if they still cross; ``stats``
    (if given) receives the ``retried`` and ``dropped`` counts.
    """
    from .network.model import cross_entropy

    rng = np.random.default_rng(seed)
    model.loss_and_grad(images, labels, train=True)
    analytic = {k: v.copy() for k, v in model.grads.items()}
    base_state = _relu_state(model)

    def loss():
        return cross_entropy(model.predict_proba(images, train=True), labels), _relu_state(model)

    def difference(w, flat, h):
        old = w.flat[flat]
        w.flat[flat] = old + h
        lp, sp = loss()
        w.flat[flat] = old - h
        lm, sm = loss()
        w.flat[flat] = old
        return (lp - lm) / (2 * h), sp == base_state and sm == base_state

    errors = {}
    retried = dropped = 0
    for key, w in model.params.items():
        if w.size == 0:
            continue
        idx = np.arange(w.size)
        if max_entries is not None and w.size > max_entries:
            idx = rng.choice(w.size, size=max_entries, replace=False)
        keep, num = [], []
        for flat in idx:
            d, smooth = difference(w, flat, step)
            if not smooth:
                retried += 1
                d, smooth = difference(w, flat, step / 100)
                if not smooth:
                    dropped += 1
                    continue
            keep.append(flat)
            num.append(d)
        if not keep:
            continue
        num = np.asarray(num)
        ana = analytic[key].ravel()[keep]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        errors[key] = float(np.linalg.norm(ana - num) / denom)
    if stats is not None:
        stats.update(retried=retried, dropped=dropped)
    return errors


def gradcheck_network(config, seed: int = 0, batch: int = 4, size: int = 8, n_classes: int = 3,
                      max_entries: Optional[int] = None, stats: Optional[dict] = None) -> dict:
    """Build a 64-bit network, move it off its symmetric init and gradcheck it.

    Batch-norm affine parameters are jittered and the residual branch outputs
    scaled up so every parameter has a gradient of useful size.
    """
    from .network.model import build_network

    model = build_network(config, n_classes, dtype=np.float64, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for k in model.params:
        if k.endswith((".scale", ".shift")):
            model.params[k] = model.params[k] + 0.3 * rng.standard_normal(model.params[k].shape)
        if ".k2." in k:
            model.params[k] = model.params[k] * 10
    images = rng.standard_normal((batch, config.in_channels, size, size))
    labels = rng.integers(0, n_classes, batch)
    return network_gradcheck(model, images, labels, max_entries=max_entries, seed=seed, stats=stats)


def network_gradient_suite(configs: list, seed: int = 0, max_entries: Optional[int] = None) -> SuiteReport:
    report = SuiteReport("network-gradient", NETWORK_GRAD_TOL)
    for cfg in configs:
        for key, err in gradcheck_network(cfg, seed=seed, max_entries=max_entries).items():
            report.record(err, f"{cfg.stencil}/{cfg.group_rule} {key}")
    return report
