"""Layout-aware batched feature maps and the elementwise / pooling primitives.

A :class:`FeatureMap` owns a contiguous physical buffer. With
``Layout.WIDTH_FASTEST`` the buffer has shape ``(B, C, H, W)``; with
``Layout.HEIGHT_FASTEST`` it has shape ``(B, C, W, H)``. Callers address
elements logically through :meth:`FeatureMap.logical` or :meth:`FeatureMap.at`
and never need to know which axis is contiguous. Only the kernels look at
``FeatureMap.data`` directly.
"""

from __future__ import annotations

import enum
from typing import Optional

import numpy as np

__all__ = [
    "Layout",
    "FeatureMap",
    "ShapeError",
    "LayoutError",
    "relu",
    "residual_add",
    "transpose_spatial",
    "avg_pool2",
    "global_avg_pool",
    "concat_channels",
]

_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class Layout(enum.Enum):
    WIDTH_FASTEST = "width_fastest"
    HEIGHT_FASTEST = "height_fastest"

    def flipped(self) -> "Layout":
        if self is Layout.WIDTH_FASTEST:
            return Layout.HEIGHT_FASTEST
        return Layout.WIDTH_FASTEST


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype.type not in _DTYPES:
        raise TypeError(f"unsupported precision {dtype}; use float32 or float64")
    return dtype


class FeatureMap:
    """Batched multi-channel 2D map with an explicit fastest-spatial-axis flag.

    The buffer is made read-only on construction; every operation returns a
    new map.
    """

    __slots__ = ("_data", "_layout")

    def __init__(self, data: np.ndarray, layout: Layout = Layout.WIDTH_FASTEST):
        if data.ndim != 4:
            raise ShapeError(f"expected a 4D physical buffer, got shape {data.shape}")
        _check_dtype(data.dtype)
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        self._data = data
        self._layout = Layout(layout)

    @classmethod
    def from_array(cls, arr, layout: Layout = Layout.WIDTH_FASTEST, dtype=None) -> "FeatureMap":
        """Build from a logical ``(B, C, H, W)`` array, copying into ``layout``."""
        arr = np.asarray(arr)
        if arr.ndim != 4:
            raise ShapeError(f"expected logical (B, C, H, W), got shape {arr.shape}")
        dtype = _check_dtype(dtype if dtype is not None else (arr.dtype if arr.dtype.kind == "f" else np.float64))
        if layout is Layout.HEIGHT_FASTEST:
            arr = arr.transpose(0, 1, 3, 2)
        return cls(np.array(arr, dtype=dtype, order="C", copy=True), layout)

    @classmethod
    def zeros(cls, batch, channels, height, width, layout=Layout.WIDTH_FASTEST, dtype=np.float64):
        shape = (batch, channels, height, width)
        if layout is Layout.HEIGHT_FASTEST:
            shape = (batch, channels, width, height)
        return cls(np.zeros(shape, dtype=_check_dtype(dtype)), layout)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def layout(self) -> Layout:
        return self._layout

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def batch(self) -> int:
        return self._data.shape[0]

    @property
    def channels(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[2] if self._layout is Layout.WIDTH_FASTEST else self._data.shape[3]

    @property
    def width(self) -> int:
        return self._data.shape[3] if self._layout is Layout.WIDTH_FASTEST else self._data.shape[2]

    @property
    def shape(self) -> tuple:
        """Logical shape ``(B, C, H, W)``."""
        return (self.batch, self.channels, self.height, self.width)

    @property
    def size(self) -> int:
        return self._data.size

    def logical(self) -> np.ndarray:
        """Read-only ``(B, C, H, W)`` view, whatever the layout."""
        if self._layout is Layout.WIDTH_FASTEST:
            return self._data
        return self._data.transpose(0, 1, 3, 2)

    def at(self, b: int, c: int, y: int, x: int) -> float:
        if self._layout is Layout.WIDTH_FASTEST:
            return self._data[b, c, y, x].item()
        return self._data[b, c, x, y].item()

    def to_layout(self, layout: Layout) -> "FeatureMap":
        if layout is self._layout:
            return self
        return transpose_spatial(self)

    def astype(self, dtype) -> "FeatureMap":
        return FeatureMap(self._data.astype(_check_dtype(dtype)), self._layout)

    def with_physical(self, data: np.ndarray, layout: Optional[Layout] = None) -> "FeatureMap":
        return FeatureMap(data, self._layout if layout is None else layout)

    def __repr__(self) -> str:
        b, c, h, w = self.shape
        return f"FeatureMap(B={b}, C={c}, H={h}, W={w}, layout={self._layout.name}, dtype={self.dtype})"


def relu(x: FeatureMap) -> FeatureMap:
    return FeatureMap(np.maximum(x.data, 0), x.layout)


def residual_add(x: FeatureMap, f: FeatureMap) -> FeatureMap:
    if x.shape != f.shape:
        raise ShapeError(f"residual shapes differ: {x.shape} vs {f.shape}")
    if x.layout is not f.layout:
        raise LayoutError(f"residual layouts differ: {x.layout.name} vs {f.layout.name}")
    return FeatureMap(x.data + f.data, x.layout)


def transpose_spatial(x: FeatureMap) -> FeatureMap:
    """Flip the layout flag and physically reorder; logical values unchanged."""
    data = np.ascontiguousarray(x.data.transpose(0, 1, 3, 2))
    return FeatureMap(data, x.layout.flipped())


def avg_pool2(x: FeatureMap) -> FeatureMap:
    """Non-overlapping 2x2 mean. Odd spatial sizes are rejected, not padded."""
    if x.height % 2 or x.width % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.height}x{x.width}")
    d = x.data
    b, c, p, q = d.shape
    # a 2x2 window is symmetric in the two axes, so pooling the physical buffer is layout-neutral
    pooled = d.reshape(b, c, p // 2, 2, q // 2, 2).mean(axis=(3, 5))
    return FeatureMap(pooled.astype(d.dtype, copy=False), x.layout)


def global_avg_pool(x: FeatureMap) -> np.ndarray:
    """Per-(batch, channel) mean over all spatial positions, shape ``(B, C)``."""
    return x.data.mean(axis=(2, 3))


def concat_channels(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    if a.batch != b.batch or a.height != b.height or a.width != b.width:
        raise ShapeError(f"cannot concatenate {a.shape} with {b.shape}")
    if a.layout is not b.layout:
        raise LayoutError("concat_channels needs matching layouts")
    if a.dtype != b.dtype:
        raise TypeError("concat_channels needs matching precision")
    return FeatureMap(np.concatenate([a.data, b.data], axis=1), a.layout)
