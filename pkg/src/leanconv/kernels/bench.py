"""Median-latency timing of the kernel paths."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..operators import LeanConvSpec, mult_count
from ..tensor import FeatureMap, Layout


@dataclass
class BenchResult:
    path: str
    median_s: float
    samples: list = field(default_factory=list)
    mults: int = 0

    @property
    def throughput(self) -> float:
        """Multiplications per second at the median latency."""
        return self.mults / self.median_s if self.median_s > 0 else float("inf")


def time_callable(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> list:
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return samples


def time_interleaved(fns: dict, repeats: int = 5, warmup: int = 1) -> dict:
    """Time several callables round-robin so slow drift hits all of them alike."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    samples = {k: [] for k in fns}
    for _ in range(repeats):
        for k, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            samples[k].append(time.perf_counter() - t0)
    return samples


def random_input(spec: LeanConvSpec, shape, rng=None, layout: Optional[Layout] = None) -> FeatureMap:
    batch, height, width = shape
    rng = np.random.default_rng(rng)
    if layout is None:
        layout = Layout.HEIGHT_FASTEST if spec.stencil.name == "THREE_V" else Layout.WIDTH_FASTEST
    data = rng.standard_normal((batch, spec.c_in, height, width)).astype(spec.dtype)
    return FeatureMap.from_array(data, layout=layout)


def benchmark_kernel(spec: LeanConvSpec, shape, path: str = "fused", repeats: int = 5,
                     rng=None, tile_config=None) -> BenchResult:
    """Median wall-clock of one path on fresh random data after one warm-up."""
    from . import apply

    x = random_input(spec, shape, rng)
    kwargs = {"cfg": tile_config} if path == "fused" and tile_config is not None else {}
    samples = time_callable(lambda: apply(spec, x, path=path, **kwargs), repeats=repeats)
    return BenchResult(
        path=path,
        median_s=statistics.median(samples),
        samples=samples,
        mults=mult_count(spec, *shape),
    )


def sweep_shapes(channels: int = 16, size: int = 512, points: int = 6) -> list:
    """``(channels, size)`` pairs doubling channels and halving the map each step."""
    out = []
    for _ in range(points):
        out.append((channels, size))
        channels, size = channels * 2, max(size // 2, 1)
    return out


def bench_sweep(shapes, stencil="5pt", batch: int = 1, repeats: int = 5, dtype=np.float32,
                seed: int = 0, threads: int = 1, baseline: bool = True) -> list:
    """Time the lean depth-wise kernel against its separate and fully-coupled counterparts.

    Per shape, three timings are taken on the same input:
    ``baseline`` is a fully-coupled 3x3 convolution (shiftIm2col),
    ``separate`` is a 1x1 GEMM plus a depth-wise stencil pass plus the sum,
    ``fused`` is the tiled kernel. Latencies are reported relative to the baseline.
    """
    from ..operators import StencilKind
    from ..tensor import residual_add
    from . import apply
    from .fused import apply_depthwise_stencil, apply_fused_tiled, apply_pointwise_gemm, auto_tile_config

    rng = np.random.default_rng(seed)
    rows = []
    for c, s in shapes:
        lean = LeanConvSpec.random(c, c, c, StencilKind.parse(stencil), rng, dtype=dtype, scale=0.1)
        x = random_input(lean, (batch, s, s), rng)
        tiles = auto_tile_config(lean, x)
        timed = time_interleaved({
            "separate": lambda: residual_add(apply_pointwise_gemm(lean, x), apply_depthwise_stencil(lean, x)),
            "fused": lambda: apply_fused_tiled(lean, x, tiles, threads=threads),
        }, repeats)
        sep, fused = statistics.median(timed["separate"]), statistics.median(timed["fused"])
        row = {"channels": c, "size": s, "batch": batch, "stencil": lean.stencil.value,
               "separate_s": sep, "fused_s": fused}
        if baseline:
            full = LeanConvSpec.random(c, c, 1, StencilKind.FULL9, rng, dtype=dtype, scale=0.1)
            xb = random_input(full, (batch, s, s), rng)
            base = statistics.median(time_callable(lambda: apply(full, xb, path="shift"), repeats))
            row.update(baseline_s=base, rel_baseline=1.0, rel_separate=sep / base, rel_fused=fused / base)
        row.update(tile=f"{tiles.t_n}x{tiles.t_o}x{tiles.t_i}", fused_le_separate=bool(fused <= sep))
        rows.append(row)
    return rows
