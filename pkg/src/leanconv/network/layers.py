"""Layers with hand-written backward passes.

Each layer reads its weights from the model's parameter registry by name at
call time, caches what its backward needs, and writes gradients back into the
registry's gradient dict.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..kernels import TileConfig
from ..operators import LeanConvSpec, StencilKind
from ..tensor import FeatureMap, ShapeError, avg_pool2, concat_channels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# fixed tiles keep network arithmetic independent of timing-based probing
NETWORK_TILES = TileConfig()


class Conv:
    def __init__(self, name, c_in, c_out, groups, stencil: StencilKind, coupling="lean"):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.groups = groups
        self.stencil = stencil
        self.coupling = coupling
        self._x = None

    @property
    def keys(self):
        return (f"{self.name}.pointwise", f"{self.name}.spatial")

    def template(self, dtype) -> LeanConvSpec:
        return LeanConvSpec.zeros(self.c_in, self.c_out, self.groups, self.stencil, dtype, self.coupling)

    def spec(self, params) -> LeanConvSpec:
        pw, sp = self.keys
        return LeanConvSpec(self.c_in, self.c_out, self.groups, self.stencil, params[pw], params[sp], self.coupling)

    def forward(self, params, x: FeatureMap, path="auto") -> FeatureMap:
        self._x = x
        spec = self.spec(params)
        if path == "auto":
            path = kernels.select_path(spec)
        if path == "fused":
            return kernels.apply_fused_tiled(spec, x, NETWORK_TILES)
        return kernels.apply(spec, x, path=path)

    def backward(self, params, grads, d_out: FeatureMap) -> FeatureMap:
        bundle = kernels.backward(self.spec(params), self._x, d_out)
        pw, sp = self.keys
        grads[pw] += bundle.d_pointwise
        grads[sp] += bundle.d_spatial
        return bundle.d_input


class BatchNorm:
    def __init__(self, name, channels):
        self.name = name
        self.channels = channels
        self._cache = None

    @property
    def keys(self):
        return (f"{self.name}.scale", f"{self.name}.shift")

    @property
    def buffer_keys(self):
        return (f"{self.name}.running_mean", f"{self.name}.running_var")

    def forward(self, params, buffers, x: FeatureMap, train: bool) -> FeatureMap:
        d = x.data
        scale, shift = (params[k].reshape(1, -1, 1, 1) for k in self.keys)
        rm, rv = self.buffer_keys
        if train:
            mean = d.mean(axis=(0, 2, 3))
            var = ((d - mean.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
            buffers[rm] = BN_MOMENTUM * buffers[rm] + (1 - BN_MOMENTUM) * mean
            buffers[rv] = BN_MOMENTUM * buffers[rv] + (1 - BN_MOMENTUM) * var
        else:
            mean, var = buffers[rm], buffers[rv]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (d - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv_std, train)
        return FeatureMap((scale * xhat + shift).astype(d.dtype, copy=False), x.layout)

    def backward(self, params, grads, d_out: FeatureMap) -> FeatureMap:
        xhat, inv_std, train = self._cache
        g = d_out.data
        sk, hk = self.keys
        grads[sk] += (g * xhat).sum(axis=(0, 2, 3))
        grads[hk] += g.sum(axis=(0, 2, 3))
        dxhat = g * params[sk].reshape(1, -1, 1, 1)
        if not train:
            return FeatureMap(dxhat * inv_std.reshape(1, -1, 1, 1), d_out.layout)
        n = g.shape[0] * g.shape[2] * g.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        dx = inv_std.reshape(1, -1, 1, 1) * (dxhat - s1 / n - xhat * s2 / n)
        return FeatureMap(dx.astype(g.dtype, copy=False), d_out.layout)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: FeatureMap) -> FeatureMap:
        self._mask = x.data > 0
        return FeatureMap(np.where(self._mask, x.data, 0).astype(x.dtype, copy=False), x.layout)

    def backward(self, d_out: FeatureMap) -> FeatureMap:
        return FeatureMap(np.where(self._mask, d_out.data, 0).astype(d_out.dtype, copy=False), d_out.layout)


def avg_pool2_backward(d_out: FeatureMap) -> FeatureMap:
    d = d_out.data
    up = np.repeat(np.repeat(d, 2, axis=2), 2, axis=3) * 0.25
    return FeatureMap(up.astype(d.dtype, copy=False), d_out.layout)


class Downsample:
    """``avg_pool2(concat(x, depthwise(x)))``: doubles channels, halves resolution."""

    def __init__(self, name, channels, stencil: StencilKind):
        if stencil is StencilKind.THREE_V:
            stencil = StencilKind.THREE_H
        self.conv = Conv(name + ".dw", channels, channels, channels, stencil, coupling="grouped")
        self.channels = channels

    def forward(self, params, x: FeatureMap) -> FeatureMap:
        if x.height % 2 or x.width % 2:
            raise ShapeError(f"downsample needs even spatial dims, got {x.height}x{x.width}")
        # the skip path keeps the block's layout, so use a layout-preserving path
        dw = self.conv.forward(params, x, path="shift")
        return avg_pool2(concat_channels(x, dw))

    def backward(self, params, grads, d_out: FeatureMap) -> FeatureMap:
        d_cat = avg_pool2_backward(d_out).data
        c = self.channels
        d_direct = d_cat[:, :c]
        d_dw = FeatureMap(np.ascontiguousarray(d_cat[:, c:]), d_out.layout)
        d_x = self.conv.backward(params, grads, d_dw)
        return FeatureMap(d_direct + d_x.data, d_out.layout)


def downsample(x: FeatureMap, dw_spec: LeanConvSpec, path="shift") -> FeatureMap:
    """Channel-doubling downsample with an explicit depth-wise spec."""
    if not dw_spec.is_depthwise or dw_spec.coupling != "grouped" or dw_spec.c_in != x.channels:
        raise ShapeError("downsample needs a spatial-only depth-wise spec over the input channels")
    if x.height % 2 or x.width % 2:
        raise ShapeError(f"downsample needs even spatial dims, got {x.height}x{x.width}")
    return avg_pool2(concat_channels(x, kernels.apply(dw_spec, x, path=path)))
