"""Execution paths for :class:`~leanconv.operators.LeanConvSpec`.

``reference``
    direct channel-pair loops; the oracle the other paths are checked against.
``shift``
    shiftIm2col: a dense GEMM for the 1x1 part plus one grouped GEMM per
    shifted view.
``fused``
    cache-tiled 1x1 GEMM with the stencil applied to the resident tile; 1D
    stencils write their output transposed.
"""

from __future__ import annotations

from ..operators import LeanConvSpec
from ..tensor import FeatureMap
from .backward import GradBundle, apply_transpose, backward, transpose_logical
from .bench import BenchResult, benchmark_kernel, time_callable
from .fused import (
    TileConfig,
    apply_depthwise_stencil,
    apply_fused_tiled,
    apply_pointwise_gemm,
    auto_tile_config,
)
from .reference import apply_reference, reference_logical
from .shift import apply_shift_im2col, shift_logical

PATHS = ("reference", "shift", "fused")

# group size (c_in / g) at or below which "auto" prefers the fused direct path;
# recalibrate with calibrate_auto_path()
AUTO_GROUP_SIZE_CROSSOVER = 4


def select_path(spec: LeanConvSpec) -> str:
    if spec.stencil.is_three1d:
        return "fused"
    if spec.c_in // spec.groups <= AUTO_GROUP_SIZE_CROSSOVER:
        return "fused"
    return "shift"


def apply(spec: LeanConvSpec, x: FeatureMap, path: str = "auto", cfg=None, threads: int = 1) -> FeatureMap:
    if path == "auto":
        path = select_path(spec)
    if path == "reference":
        return apply_reference(spec, x)
    if path == "shift":
        return apply_shift_im2col(spec, x)
    if path == "fused":
        return apply_fused_tiled(spec, x, cfg, threads=threads)
    raise ValueError(f"unknown path {path!r}; choose from {PATHS} or 'auto'")


def calibrate_auto_path(channels: int = 64, size: int = 32, repeats: int = 3, stencil="5pt") -> int:
    """Measure the group size where shiftIm2col overtakes the fused path and store it."""
    global AUTO_GROUP_SIZE_CROSSOVER
    crossover = 0
    gsize = 1
    while gsize <= channels:
        spec = LeanConvSpec.random(channels, channels, channels // gsize, stencil, rng=0, dtype="float32")
        fused = benchmark_kernel(spec, (1, size, size), "fused", repeats=repeats).median_s
        shift = benchmark_kernel(spec, (1, size, size), "shift", repeats=repeats).median_s
        if fused <= shift:
            crossover = gsize
        gsize *= 2
    AUTO_GROUP_SIZE_CROSSOVER = crossover
    return crossover


__all__ = [
    "PATHS",
    "GradBundle",
    "BenchResult",
    "TileConfig",
    "apply",
    "apply_reference",
    "apply_shift_im2col",
    "apply_fused_tiled",
    "apply_depthwise_stencil",
    "apply_pointwise_gemm",
    "apply_transpose",
    "auto_tile_config",
    "backward",
    "benchmark_kernel",
    "calibrate_auto_path",
    "reference_logical",
    "select_path",
    "shift_logical",
    "time_callable",
    "transpose_logical",
]
