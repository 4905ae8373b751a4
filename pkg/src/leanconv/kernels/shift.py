"""shiftIm2col: one GEMM for the 1x1 part, one grouped GEMM per stencil offset."""

from __future__ import annotations

import numpy as np

from ..operators import LeanConvSpec
from ..tensor import FeatureMap
from .reference import check_input


def channel_major(x: np.ndarray, pad: int = 0) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(C, B, H + 2p, W + 2p)`` contiguous, zero padded."""
    b, c, h, w = x.shape
    out = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return out


def shifted_columns(padded: np.ndarray, dy: int, dx: int, h: int, w: int) -> np.ndarray:
    """Columns of the shifted view, ``(C, B*H*W)``; ``padded`` has a 1-pixel border."""
    c, b = padded.shape[:2]
    view = padded[:, :, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return view.reshape(c, b * h * w)


def grouped_matmul(weights: np.ndarray, cols: np.ndarray, groups: int) -> np.ndarray:
    """``weights`` is ``(c_out, c_in/g)``, ``cols`` is ``(c_in, N)``; returns ``(c_out, N)``."""
    # strided weight slices make numpy skip BLAS
    weights = np.ascontiguousarray(weights)
    c_out, gi = weights.shape
    n = cols.shape[1]
    if groups == 1:
        return weights @ cols
    wg = weights.reshape(groups, c_out // groups, gi)
    return np.matmul(wg, cols.reshape(groups, gi, n)).reshape(c_out, n)


def shift_logical(spec: LeanConvSpec, x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    n = b * h * w
    offsets = spec.stencil.offsets
    padded = channel_major(x, pad=1 if offsets else 0)
    if offsets:
        center = np.ascontiguousarray(padded[:, :, 1:1 + h, 1:1 + w]).reshape(c, n)
    else:
        center = padded.reshape(c, n)
    if spec.coupling == "lean":
        out = spec.pointwise @ center
    else:
        out = grouped_matmul(spec.pointwise, center, spec.groups)
    for q, (dy, dx) in enumerate(offsets):
        cols = shifted_columns(padded, dy, dx, h, w)
        out += grouped_matmul(spec.spatial[:, :, q], cols, spec.groups)
    return out.reshape(spec.c_out, b, h, w).transpose(1, 0, 2, 3)


def apply_shift_im2col(spec: LeanConvSpec, x: FeatureMap) -> FeatureMap:
    check_input(spec, x)
    return FeatureMap.from_array(shift_logical(spec, x.logical()), layout=x.layout, dtype=x.dtype)
