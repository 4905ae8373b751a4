"""Declarative convolution operators, cost accounting and the dense oracle.

A lean operator is the sum of a fully-coupled 1x1 convolution and a grouped
spatial convolution whose stencils have had their center removed: the center
of every in-group stencil is the corresponding entry of the 1x1 matrix. All
operators are applied as cross-correlations with zero padding and same-size
output::

    y[b, o, p] = sum_i alpha[o, i] x[b, i, p]
               + sum_{i in group(o)} sum_q w[o, i, q] x[b, i, p + q]

Spatial weights are stored as ``(c_out, c_in // g, s)``: row ``o`` holds the
off-center taps that couple output ``o`` to the ``c_in // g`` inputs of its
group, in the order given by :attr:`StencilKind.offsets`.

``coupling="grouped"`` gives the plain grouped convolution (the 1x1 part is
restricted to group blocks too and ``pointwise`` has shape
``(c_out, c_in // g)``). With ``g == 1`` both couplings are the ordinary
fully-coupled convolution.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

__all__ = [
    "SpecError",
    "StencilKind",
    "LeanConvSpec",
    "CostReport",
    "validate",
    "param_count",
    "mult_count",
    "choose_groups",
    "largest_divisor_at_most",
    "materialize_dense",
    "nnz_count",
    "spec_to_dict",
    "spec_from_dict",
    "dumps_spec",
    "loads_spec",
]

DENSE_ENTRY_LIMIT = 50_000_000


class SpecError(ValueError):
    pass


_OFFSETS = {
    "9pt": ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
    # order (up, left, right, down) follows the 5-point stencil's c1..c4
    "5pt": ((-1, 0), (0, -1), (0, 1), (1, 0)),
    "3pt-h": ((0, -1), (0, 1)),
    "3pt-v": ((-1, 0), (1, 0)),
    "1x1": (),
}


class StencilKind(enum.Enum):
    FULL9 = "9pt"
    FIVE = "5pt"
    THREE_H = "3pt-h"
    THREE_V = "3pt-v"
    POINTWISE = "1x1"

    @property
    def offsets(self) -> tuple:
        """Off-center ``(dy, dx)`` taps; the center always belongs to the 1x1 part."""
        return _OFFSETS[self.value]

    @property
    def size(self) -> int:
        """Off-center stencil size ``s`` (8, 4, 2 or 0)."""
        return len(_OFFSETS[self.value])

    @property
    def points(self) -> int:
        """Full stencil size ``r`` including the center."""
        return self.size + 1

    @property
    def is_three1d(self) -> bool:
        return self in (StencilKind.THREE_H, StencilKind.THREE_V)

    @property
    def direction(self) -> Optional[str]:
        return {StencilKind.THREE_H: "horizontal", StencilKind.THREE_V: "vertical"}.get(self)

    @classmethod
    def parse(cls, name: str) -> "StencilKind":
        aliases = {
            "full9": "9pt", "9": "9pt", "3x3": "9pt",
            "five": "5pt", "5": "5pt",
            "3pt": "3pt-h", "3pt-horizontal": "3pt-h", "3pt-vertical": "3pt-v",
            "pointwise": "1x1", "none": "1x1",
        }
        key = name.strip().lower()
        return cls(aliases.get(key, key))


@dataclass(frozen=True, eq=False)
class LeanConvSpec:
    c_in: int
    c_out: int
    groups: int
    stencil: StencilKind
    pointwise: np.ndarray
    spatial: np.ndarray
    coupling: str = "lean"

    @property
    def group_in(self) -> int:
        return self.c_in // self.groups

    @property
    def group_out(self) -> int:
        return self.c_out // self.groups

    @property
    def dtype(self) -> np.dtype:
        return self.pointwise.dtype

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.c_in == self.c_out

    def pointwise_shape(self) -> tuple:
        if self.coupling == "grouped":
            return (self.c_out, self.c_in // self.groups)
        return (self.c_out, self.c_in)

    def spatial_shape(self) -> tuple:
        return (self.c_out, self.c_in // self.groups, self.stencil.size)

    def full_pointwise(self) -> np.ndarray:
        """The 1x1 part as a dense ``(c_out, c_in)`` matrix."""
        if self.coupling == "lean":
            return self.pointwise
        dense = np.zeros((self.c_out, self.c_in), dtype=self.pointwise.dtype)
        for k in range(self.groups):
            rows = slice(k * self.group_out, (k + 1) * self.group_out)
            cols = slice(k * self.group_in, (k + 1) * self.group_in)
            dense[rows, cols] = self.pointwise[rows]
        return dense

    def in_group_pairs(self) -> Iterator[tuple]:
        """Yield ``(o, i, j)``: output, absolute input channel, index within the group."""
        gi, go = self.group_in, self.group_out
        for o in range(self.c_out):
            base = (o // go) * gi
            for j in range(gi):
                yield o, base + j, j

    def replace(self, **changes) -> "LeanConvSpec":
        fields = dict(
            c_in=self.c_in, c_out=self.c_out, groups=self.groups, stencil=self.stencil,
            pointwise=self.pointwise, spatial=self.spatial, coupling=self.coupling,
        )
        fields.update(changes)
        return LeanConvSpec(**fields)

    def astype(self, dtype) -> "LeanConvSpec":
        return self.replace(pointwise=self.pointwise.astype(dtype), spatial=self.spatial.astype(dtype))

    @classmethod
    def zeros(cls, c_in, c_out, groups, stencil, dtype=np.float64, coupling="lean") -> "LeanConvSpec":
        stencil = _as_stencil(stencil)
        pw = (c_out, c_in if coupling == "lean" else c_in // max(groups, 1))
        return cls(
            c_in, c_out, groups, stencil,
            np.zeros(pw, dtype=dtype),
            np.zeros((c_out, c_in // max(groups, 1), stencil.size), dtype=dtype),
            coupling,
        )

    @classmethod
    def random(cls, c_in, c_out, groups, stencil, rng=None, dtype=np.float64,
               coupling="lean", scale=1.0) -> "LeanConvSpec":
        rng = np.random.default_rng(rng)
        spec = cls.zeros(c_in, c_out, groups, stencil, dtype, coupling)
        return spec.replace(
            pointwise=(scale * rng.standard_normal(spec.pointwise.shape)).astype(dtype),
            spatial=(scale * rng.standard_normal(spec.spatial.shape)).astype(dtype),
        )


def _as_stencil(stencil) -> StencilKind:
    if isinstance(stencil, StencilKind):
        return stencil
    return StencilKind.parse(str(stencil))


@dataclass(frozen=True)
class CostReport:
    params: int
    mults: int

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.params + other.params, self.mults + other.mults)


def validate(spec: LeanConvSpec) -> bool:
    """Raise :class:`SpecError` unless every structural invariant holds."""
    for name in ("c_in", "c_out", "groups"):
        v = getattr(spec, name)
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise SpecError(f"{name} must be a positive integer, got {v!r}")
    if not isinstance(spec.stencil, StencilKind):
        raise SpecError(f"unknown stencil {spec.stencil!r}")
    if spec.coupling not in ("lean", "grouped"):
        raise SpecError(f"coupling must be 'lean' or 'grouped', got {spec.coupling!r}")
    if spec.c_in % spec.groups or spec.c_out % spec.groups:
        raise SpecError(
            f"groups={spec.groups} must divide c_in={spec.c_in} and c_out={spec.c_out}"
        )
    pw = np.asarray(spec.pointwise)
    sp = np.asarray(spec.spatial)
    if pw.shape != spec.pointwise_shape():
        raise SpecError(f"pointwise shape {pw.shape} != expected {spec.pointwise_shape()}")
    if sp.shape != spec.spatial_shape():
        raise SpecError(f"spatial shape {sp.shape} != expected {spec.spatial_shape()}")
    if pw.dtype != sp.dtype or pw.dtype.type not in (np.float32, np.float64):
        raise SpecError("pointwise and spatial weights must share a float32/float64 dtype")
    return True


def param_count(spec: LeanConvSpec) -> int:
    validate(spec)
    return int(spec.pointwise.size + spec.spatial.size)


def mult_count(spec: LeanConvSpec, batch: int, height: int, width: int) -> int:
    """Multiplications of one forward application; padded-zero taps are counted."""
    return int(batch) * int(height) * int(width) * param_count(spec)


def cost(spec: LeanConvSpec, batch: int, height: int, width: int) -> CostReport:
    return CostReport(param_count(spec), mult_count(spec, batch, height, width))


def largest_divisor_at_most(n: int, bound: float) -> int:
    """Largest divisor of ``n`` that is ``<= bound`` (at least 1)."""
    if n < 1:
        raise ValueError("n must be positive")
    best = 1
    for d in range(1, math.isqrt(n) + 1):
        if n % d == 0:
            for cand in (d, n // d):
                if best < cand <= bound:
                    best = cand
    return best


def choose_groups(channels: int, stencil_size: int, ratio: float) -> int:
    """Group count keeping spatial/pointwise weights near ``ratio``.

    The target is ``(r - 1) / ratio``, rounded down to a divisor of
    ``channels``.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    target = (stencil_size - 1) / ratio
    return largest_divisor_at_most(channels, max(target, 1.0))


def _valid_count(length: int, shift: int) -> int:
    return max(length - abs(shift), 0)


def nnz_count(spec: LeanConvSpec, height: int, width: int) -> int:
    """Structural nonzeros of :func:`materialize_dense`, without assembling it."""
    validate(spec)
    hw = height * width
    dense_pointwise_pairs = spec.c_out * (spec.c_in if spec.coupling == "lean" else spec.group_in)
    total = dense_pointwise_pairs * hw
    per_pair = sum(_valid_count(height, dy) * _valid_count(width, dx) for dy, dx in spec.stencil.offsets)
    return int(total + spec.c_out * spec.group_in * per_pair)


def _shift_indices(height: int, width: int, dy: int, dx: int):
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ok = (ys + dy >= 0) & (ys + dy < height) & (xs + dx >= 0) & (xs + dx < width)
    rows = (ys * width + xs)[ok]
    cols = ((ys + dy) * width + (xs + dx))[ok]
    return rows, cols


def materialize_dense(spec: LeanConvSpec, height: int, width: int,
                      max_entries: int = DENSE_ENTRY_LIMIT) -> np.ndarray:
    """The exact linear operator as a dense ``(c_out*H*W, c_in*H*W)`` matrix.

    Row index is ``o*H*W + y*W + x`` and column index ``i*H*W + y*W + x``,
    matching a C-order flatten of a logical ``(C, H, W)`` map.
    """
    validate(spec)
    hw = height * width
    n_rows, n_cols = spec.c_out * hw, spec.c_in * hw
    if n_rows * n_cols > max_entries:
        raise SpecError(f"dense operator {n_rows}x{n_cols} exceeds the {max_entries}-entry guard")
    mat = np.zeros((n_rows, n_cols), dtype=np.float64)
    diag = np.arange(hw)
    alpha = spec.full_pointwise()
    for o in range(spec.c_out):
        for i in range(spec.c_in):
            mat[o * hw + diag, i * hw + diag] = alpha[o, i]
    w = spec.spatial
    for q, (dy, dx) in enumerate(spec.stencil.offsets):
        rows, cols = _shift_indices(height, width, dy, dx)
        for o, i, j in spec.in_group_pairs():
            mat[o * hw + rows, i * hw + cols] += w[o, j, q]
    return mat


def spec_to_dict(spec: LeanConvSpec) -> dict:
    return {
        "c_in": int(spec.c_in),
        "c_out": int(spec.c_out),
        "groups": int(spec.groups),
        "stencil": spec.stencil.value,
        "coupling": spec.coupling,
        "dtype": np.dtype(spec.dtype).name,
        "pointwise": spec.pointwise.tolist(),
        "spatial": spec.spatial.tolist(),
    }


def spec_from_dict(doc: dict) -> LeanConvSpec:
    dtype = np.dtype(doc.get("dtype", "float64"))
    stencil = StencilKind.parse(doc["stencil"])
    c_in, c_out, g = int(doc["c_in"]), int(doc["c_out"]), int(doc["groups"])
    coupling = doc.get("coupling", "lean")
    spatial = np.asarray(doc["spatial"], dtype=dtype)
    if spatial.size == 0:
        spatial = spatial.reshape(c_out, c_in // max(g, 1), stencil.size)
    spec = LeanConvSpec(
        c_in, c_out, g, stencil,
        np.asarray(doc["pointwise"], dtype=dtype),
        spatial,
        coupling,
    )
    validate(spec)
    return spec


def dumps_spec(spec: LeanConvSpec) -> str:
    return json.dumps(spec_to_dict(spec))


def loads_spec(text: str) -> LeanConvSpec:
    return spec_from_dict(json.loads(text))
