"""Direct-loop application of a :class:`LeanConvSpec`; the correctness anchor."""

from __future__ import annotations

import numpy as np

from ..operators import LeanConvSpec, SpecError, validate
from ..tensor import FeatureMap


def check_input(spec: LeanConvSpec, x: FeatureMap) -> None:
    validate(spec)
    if x.channels != spec.c_in:
        raise SpecError(f"input has {x.channels} channels, operator expects c_in={spec.c_in}")
    if x.dtype != spec.dtype:
        raise TypeError(f"precision mismatch: input {x.dtype}, weights {spec.dtype}")


def shifted(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[..., y, x] = plane[..., y + dy, x + dx]`` with zeros outside."""
    out = np.zeros_like(plane)
    h, w = plane.shape[-2:]
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[..., ys, xs] = plane[..., ys_src, xs_src]
    return out


def reference_logical(spec: LeanConvSpec, x: np.ndarray) -> np.ndarray:
    """Apply ``spec`` to a logical ``(B, C, H, W)`` array by explicit channel-pair loops."""
    b, _, h, w = x.shape
    out = np.zeros((b, spec.c_out, h, w), dtype=x.dtype)
    alpha = spec.full_pointwise()
    for o in range(spec.c_out):
        for i in range(spec.c_in):
            a = alpha[o, i]
            if a != 0:
                out[:, o] += a * x[:, i]
    offsets = spec.stencil.offsets
    if offsets:
        shifts = [[shifted(x[:, i], dy, dx) for dy, dx in offsets] for i in range(spec.c_in)]
        for o, i, j in spec.in_group_pairs():
            for q in range(len(offsets)):
                out[:, o] += spec.spatial[o, j, q] * shifts[i][q]
    return out


def apply_reference(spec: LeanConvSpec, x: FeatureMap) -> FeatureMap:
    check_input(spec, x)
    out = reference_logical(spec, x.logical())
    return FeatureMap.from_array(out, layout=x.layout, dtype=x.dtype)
