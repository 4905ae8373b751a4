"""Cache-tiled fused lean convolution.

Every task owns one ``(batch, spatial tile, output-channel tile)`` block of
the output. For each input-channel block it fetches the ``t_i x t_n`` input
tile once (plus the few halo values the stencil needs across the tile edge),
multiplies it by the matching ``t_o x t_i`` block of the 1x1 matrix, and
applies the in-group stencil taps to the same resident tile. 1D stencils run
along the contiguous axis and write their result transposed, so the next 1D
operator in the other direction again finds contiguous data.

The GEMM runs through BLAS; the stencil accumulation and the transposed write
are small numba loops.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from ..operators import LeanConvSpec, SpecError, StencilKind
from ..tensor import FeatureMap, Layout, LayoutError
from .reference import check_input


@dataclass(frozen=True)
class TileConfig:
    t_n: int = 64
    t_o: int = 16
    t_i: int = 16

    def __post_init__(self):
        if min(self.t_n, self.t_o, self.t_i) < 1:
            raise ValueError(f"tile sizes must be >= 1, got {self}")

    def working_set(self) -> int:
        return self.t_n * self.t_i + self.t_i * self.t_o + self.t_n * self.t_o


@njit(cache=True, nogil=True)
def _stencil_tile(acc, blk, w, dps, dqs, o0, i0, n0, e0, n_rows, n_cols, go, gi):
    # acc[ol, n - n0] += w[o, j, q] * x[i, n + shift(q)] for in-group (o, i) inside this block.
    # Rows outermost and taps innermost keep one output row hot in L1 across all taps.
    to, tn = acc.shape
    ti = blk.shape[0]
    n1 = n0 + tn
    for ol in range(to):
        o = o0 + ol
        gbase = (o // go) * gi
        lo = max(gbase, i0)
        hi = min(gbase + gi, i0 + ti)
        arow = acc[ol]
        for i in range(lo, hi):
            j = i - gbase
            brow = blk[i - i0]
            n = n0
            while n < n1:
                r = n // n_cols
                c = n - r * n_cols
                row_end = min(n1, (r + 1) * n_cols)
                c_end = c + (row_end - n)
                dst = r * n_cols - n0
                for qi in range(dps.shape[0]):
                    rr = r + dps[qi]
                    if 0 <= rr < n_rows:
                        dq = dqs[qi]
                        wt = w[o, j, qi]
                        cs = max(c, -dq)
                        ce = min(c_end, n_cols - dq)
                        src = rr * n_cols + dq - e0
                        # slice first so the loop index is provably non-negative
                        # (no wraparound check, so the loop vectorizes)
                        av = arow[dst + cs:dst + ce]
                        bv = brow[src + cs:src + ce]
                        for k in range(av.shape[0]):
                            av[k] += wt * bv[k]
                n = row_end


@njit(cache=True, nogil=True)
def _write_transposed(dst, acc, n0, n_cols):
    # dst is the (t_o, Q, P) slab of the transposed output
    to, tn = acc.shape
    for ol in range(to):
        for k in range(tn):
            n = n0 + k
            r = n // n_cols
            c = n - r * n_cols
            dst[ol, c, r] = acc[ol, k]


def physical_offsets(stencil: StencilKind, layout: Layout):
    """Stencil taps as ``(d_slow, d_fast)`` offsets in the physical buffer."""
    offs = stencil.offsets
    if layout is Layout.HEIGHT_FASTEST:
        offs = tuple((dx, dy) for dy, dx in offs)
    dps = np.array([p for p, _ in offs], dtype=np.int64)
    dqs = np.array([q for _, q in offs], dtype=np.int64)
    return dps, dqs


def check_direction(stencil: StencilKind, layout: Layout) -> None:
    if stencil is StencilKind.THREE_H and layout is not Layout.WIDTH_FASTEST:
        raise LayoutError("a horizontal 3-point stencil needs a width-fastest input")
    if stencil is StencilKind.THREE_V and layout is not Layout.HEIGHT_FASTEST:
        raise LayoutError("a vertical 3-point stencil needs a height-fastest input")


def _groups_touch(o0, o1, i0, i1, go, gi) -> bool:
    return o0 // go <= (i1 - 1) // gi and i0 // gi <= (o1 - 1) // go


def _run_tile(xf, out, alpha, w, dps, dqs, b, n0, n1, cfg, n_rows, n_cols, go, gi, transposed):
    c_out, c_in = alpha.shape
    has_stencil = dps.shape[0] > 0
    for o0 in range(0, c_out, cfg.t_o):
        o1 = min(c_out, o0 + cfg.t_o)
        acc = np.empty((o1 - o0, n1 - n0), dtype=xf.dtype)
        for i0 in range(0, c_in, cfg.t_i):
            i1 = min(c_in, i0 + cfg.t_i)
            rows = xf[b, i0:i1]
            interior = rows[:, n0:n1]
            if i0 == 0:
                np.matmul(alpha[o0:o1, i0:i1], interior, out=acc)
            else:
                acc += alpha[o0:o1, i0:i1] @ interior
            if has_stencil and _groups_touch(o0, o1, i0, i1, go, gi):
                # whole channel rows keep numba's view contiguous; only the tile and its halo are read
                _stencil_tile(acc, rows, w, dps, dqs, o0, i0, n0, 0, n_rows, n_cols, go, gi)
        if transposed:
            _write_transposed(out[b, o0:o1], acc, n0, n_cols)
        else:
            out[b, o0:o1, n0:n1] = acc


def apply_fused_tiled(spec: LeanConvSpec, x: FeatureMap, cfg: Optional[TileConfig] = None,
                      threads: int = 1) -> FeatureMap:
    """Fused 1x1 + grouped-stencil application over cache tiles.

    3-point stencils must run along the contiguous axis and return a map in
    the flipped layout; every other stencil keeps the input layout.
    """
    check_input(spec, x)
    check_direction(spec.stencil, x.layout)
    if cfg is None:
        cfg = auto_tile_config(spec, x)
    transposed = spec.stencil.is_three1d
    phys = x.data
    bsz, c_in, n_rows, n_cols = phys.shape
    n_total = n_rows * n_cols
    xf = phys.reshape(bsz, c_in, n_total)
    dps, dqs = physical_offsets(spec.stencil, x.layout)
    alpha = np.ascontiguousarray(spec.full_pointwise())
    w = np.ascontiguousarray(spec.spatial)
    if transposed:
        out = np.empty((bsz, spec.c_out, n_cols, n_rows), dtype=x.dtype)
    else:
        out = np.empty((bsz, spec.c_out, n_total), dtype=x.dtype)
    tasks = [(b, n0, min(n_total, n0 + cfg.t_n)) for b in range(bsz) for n0 in range(0, n_total, cfg.t_n)]

    def run(task):
        b, n0, n1 = task
        _run_tile(xf, out, alpha, w, dps, dqs, b, n0, n1, cfg, n_rows, n_cols,
                  spec.group_out, spec.group_in, transposed)

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, tasks))
    else:
        for t in tasks:
            run(t)
    if transposed:
        return FeatureMap(out, x.layout.flipped())
    return FeatureMap(out.reshape(bsz, spec.c_out, n_rows, n_cols), x.layout)


def apply_depthwise_stencil(spec: LeanConvSpec, x: FeatureMap) -> FeatureMap:
    """Only the grouped off-center taps, as one full-map pass (no 1x1 part)."""
    check_input(spec, x)
    phys = x.data
    bsz, c_in, n_rows, n_cols = phys.shape
    n_total = n_rows * n_cols
    xf = phys.reshape(bsz, c_in, n_total)
    dps, dqs = physical_offsets(spec.stencil, x.layout)
    out = np.zeros((bsz, spec.c_out, n_total), dtype=x.dtype)
    w = np.ascontiguousarray(spec.spatial)
    for b in range(bsz):
        _stencil_tile(out[b], xf[b], w, dps, dqs, 0, 0, 0, 0, n_rows, n_cols, spec.group_out, spec.group_in)
    return FeatureMap(out.reshape(bsz, spec.c_out, n_rows, n_cols), x.layout)


def apply_pointwise_gemm(spec: LeanConvSpec, x: FeatureMap) -> FeatureMap:
    """Only the 1x1 part, as one GEMM per batch entry."""
    check_input(spec, x)
    phys = x.data
    bsz, c_in, n_rows, n_cols = phys.shape
    xf = phys.reshape(bsz, c_in, n_rows * n_cols)
    out = np.matmul(spec.full_pointwise(), xf)
    return FeatureMap(out.reshape(bsz, spec.c_out, n_rows, n_cols), x.layout)


_PROBE_CACHE: dict = {}


def _probe_grid(spec: LeanConvSpec, n_total: int):
    t_ns = sorted({min(n_total, t) for t in (256, 1024, 4096, 16384)})
    c = max(spec.c_in, spec.c_out)
    chans = sorted({min(t, c) for t in (16, 32, 64)} | {c})
    return [TileConfig(t_n, t_c, t_c) for t_n in t_ns for t_c in chans]


def auto_tile_config(spec: LeanConvSpec, x: FeatureMap, repeats: int = 5) -> TileConfig:
    """Pick the fastest config from a small grid, once per problem class.

    Each candidate is timed ``repeats`` times after a warm-up and ranked by
    its fastest run, which is less sensitive to scheduler noise than the median. Set ``LEANCONV_NO_PROBE=1`` to always use :class:`TileConfig`
    defaults.
    """
    if os.environ.get("LEANCONV_NO_PROBE"):
        return TileConfig()
    n_total = x.height * x.width
    key = (spec.c_in, spec.c_out, spec.groups, spec.stencil, n_total, x.batch, str(x.dtype))
    if key in _PROBE_CACHE:
        return _PROBE_CACHE[key]
    import time

    best, best_t = TileConfig(), float("inf")
    for cfg in _probe_grid(spec, n_total):
        apply_fused_tiled(spec, x, cfg)
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            apply_fused_tiled(spec, x, cfg)
            samples.append(time.perf_counter() - t0)
        dt = min(samples)
        if dt < best_t:
            best, best_t = cfg, dt
    _PROBE_CACHE[key] = best
    return best


__all__ = [
    "TileConfig",
    "apply_fused_tiled",
    "apply_depthwise_stencil",
    "apply_pointwise_gemm",
    "auto_tile_config",
    "check_direction",
    "SpecError",
]
