"""Reverse-mode gradients of a lean convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..operators import LeanConvSpec
from ..tensor import FeatureMap, ShapeError
from .reference import check_input
from .shift import channel_major, grouped_matmul, shifted_columns


@dataclass
class GradBundle:
    d_input: FeatureMap
    d_pointwise: np.ndarray
    d_spatial: np.ndarray


def _grouped_outer(d_cols: np.ndarray, x_cols: np.ndarray, groups: int) -> np.ndarray:
    """``sum_n d[o, n] x[i, n]`` for in-group pairs, shaped ``(c_out, c_in/g)``."""
    c_out, n = d_cols.shape
    c_in = x_cols.shape[0]
    if groups == 1:
        return d_cols @ x_cols.T
    dg = d_cols.reshape(groups, c_out // groups, n)
    xg = x_cols.reshape(groups, c_in // groups, n)
    return np.matmul(dg, xg.transpose(0, 2, 1)).reshape(c_out, c_in // groups)


def transpose_logical(spec: LeanConvSpec, d: np.ndarray) -> np.ndarray:
    """Apply the adjoint operator to a logical ``(B, c_out, H, W)`` array."""
    b, _, h, w = d.shape
    n = b * h * w
    offsets = spec.stencil.offsets
    padded = channel_major(d, pad=1 if offsets else 0)
    if offsets:
        center = np.ascontiguousarray(padded[:, :, 1:1 + h, 1:1 + w]).reshape(spec.c_out, n)
    else:
        center = padded.reshape(spec.c_out, n)
    if spec.coupling == "lean":
        out = spec.pointwise.T @ center
    else:
        out = grouped_matmul(_block_transpose(spec.pointwise, spec.groups), center, spec.groups)
    for q, (dy, dx) in enumerate(offsets):
        # x(p) feeds y(p - q): the adjoint tap sits at the negated offset
        cols = shifted_columns(padded, -dy, -dx, h, w)
        out += grouped_matmul(_block_transpose(spec.spatial[:, :, q], spec.groups), cols, spec.groups)
    return out.reshape(spec.c_in, b, h, w).transpose(1, 0, 2, 3)


def _block_transpose(weights: np.ndarray, groups: int) -> np.ndarray:
    """Per-group transpose of a ``(c_out, c_in/g)`` block store -> ``(c_in, c_out/g)``."""
    c_out, gi = weights.shape
    go = c_out // groups
    return weights.reshape(groups, go, gi).transpose(0, 2, 1).reshape(groups * gi, go)


def backward(spec: LeanConvSpec, x: FeatureMap, d_out: FeatureMap) -> GradBundle:
    check_input(spec, x)
    if d_out.shape != (x.batch, spec.c_out, x.height, x.width):
        raise ShapeError(f"d_out shape {d_out.shape} does not match the forward output")
    xl = x.logical()
    dl = d_out.logical()
    b, _, h, w = xl.shape
    n = b * h * w
    d_cols = np.ascontiguousarray(dl.transpose(1, 0, 2, 3)).reshape(spec.c_out, n)
    offsets = spec.stencil.offsets
    xpad = channel_major(xl, pad=1 if offsets else 0)
    if offsets:
        x_center = np.ascontiguousarray(xpad[:, :, 1:1 + h, 1:1 + w]).reshape(spec.c_in, n)
    else:
        x_center = xpad.reshape(spec.c_in, n)
    if spec.coupling == "lean":
        d_pointwise = d_cols @ x_center.T
    else:
        d_pointwise = _grouped_outer(d_cols, x_center, spec.groups)
    d_spatial = np.zeros_like(spec.spatial)
    for q, (dy, dx) in enumerate(offsets):
        d_spatial[:, :, q] = _grouped_outer(d_cols, shifted_columns(xpad, dy, dx, h, w), spec.groups)
    d_in = transpose_logical(spec, dl)
    return GradBundle(
        d_input=FeatureMap.from_array(d_in, layout=x.layout, dtype=x.dtype),
        d_pointwise=d_pointwise.astype(spec.dtype, copy=False),
        d_spatial=d_spatial,
    )


def apply_transpose(spec: LeanConvSpec, u: FeatureMap, layout=None) -> FeatureMap:
    """The ``d_input`` map of :func:`backward` on its own."""
    out = transpose_logical(spec, u.logical())
    return FeatureMap.from_array(out, layout=u.layout if layout is None else layout, dtype=u.dtype)
