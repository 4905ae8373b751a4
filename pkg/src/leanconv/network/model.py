"""Pre-activation LeanResNet assembled from a stage table.

Each residual step computes ``y + K2 relu(N(K1 relu(N(y))))``. Between
stages of stride 2 the first step is a transition step: its skip path is the
channel-doubling downsample ``avg_pool2(concat(y, depthwise(y)))`` and its
residual branch widens with a rectangular ``K1`` (``c/2 -> c``) applied at
the incoming resolution, average-pools, and then applies ``K2`` at the new
resolution. ``transition="plain"`` instead downsamples first and runs
ordinary square steps afterwards.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..operators import CostReport, StencilKind, choose_groups, largest_divisor_at_most, param_count
from ..tensor import FeatureMap, Layout, ShapeError, avg_pool2, global_avg_pool, residual_add
from .layers import BatchNorm, Conv, Downsample, ReLU, avg_pool2_backward

__all__ = [
    "NetworkConfig",
    "TABLE_I",
    "table_config",
    "pointwise_probe_config",
    "resolve_groups",
    "LeanResNet",
    "build_network",
    "softmax",
    "classify",
    "cross_entropy",
]


@dataclass
class NetworkConfig:
    stage_widths: list
    stage_steps: list
    stage_strides: list
    stencil: str = "9pt"
    group_rule: str = "1"
    in_channels: int = 3
    transition: str = "branch"
    coupling: str = "lean"
    # stencil of the opening layer; "1x1" gives a network with no spatial mixing before pooling
    opening_stencil: str = "9pt"

    def validate(self) -> None:
        n = len(self.stage_widths)
        if n == 0 or len(self.stage_steps) != n or len(self.stage_strides) != n:
            raise ValueError("stage_widths, stage_steps and stage_strides must have equal nonzero length")
        if any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError(f"strides must be 1 or 2, got {self.stage_strides}")
        if any(s < 1 for s in self.stage_steps):
            raise ValueError("every stage needs at least one step")
        if self.transition not in ("branch", "plain"):
            raise ValueError(f"transition must be 'branch' or 'plain', got {self.transition!r}")
        prev = None
        for w, s in zip(self.stage_widths, self.stage_strides):
            if s == 2 and w % 2:
                raise ValueError(f"stride-2 stage width {w} must be even")
            if prev is not None and w != (2 * prev if s == 2 else prev):
                raise ValueError(
                    f"width {w} after {prev} with stride {s}: stride 2 doubles channels, stride 1 keeps them"
                )
            prev = w
        StencilKind.parse(self.stencil)
        StencilKind.parse(self.opening_stencil)

    @property
    def stencil_kind(self) -> StencilKind:
        return StencilKind.parse(self.stencil)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkConfig":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        cfg = cls(**known)
        cfg.stage_widths = [int(v) for v in cfg.stage_widths]
        cfg.stage_steps = [int(v) for v in cfg.stage_steps]
        cfg.stage_strides = [int(v) for v in cfg.stage_strides]
        return cfg


TABLE_I = {
    "Res18": ([32, 64, 128, 256], [2, 2, 2, 2], [1, 2, 2, 2]),
    "Res24-narrow": ([12, 24, 48, 96], [2, 3, 3, 3], [1, 2, 2, 2]),
    "Res24": ([32, 64, 128, 256], [2, 3, 3, 3], [1, 2, 2, 2]),
    "Res34": ([64, 128, 256, 512], [3, 4, 6, 3], [1, 2, 2, 2]),
    "Res38-narrow": ([24, 48, 96, 192, 384], [4, 5, 5, 3, 1], [1, 2, 2, 2, 2]),
    "Res38": ([64, 128, 256, 512, 1024], [4, 5, 5, 3, 1], [1, 2, 2, 2, 2]),
    "Res40-narrow": ([24, 48, 96, 192], [3, 5, 7, 4], [1, 2, 2, 2]),
    "Res40": ([64, 128, 256, 512], [3, 5, 7, 4], [1, 2, 2, 2]),
}


def table_config(name: str, stencil="9pt", group_rule="1", **kw) -> NetworkConfig:
    widths, steps, strides = TABLE_I[name]
    return NetworkConfig(list(widths), list(steps), list(strides), stencil, group_rule, **kw)


def resolve_groups(rule: str, c_in: int, c_out: int, stencil: StencilKind) -> int:
    """Group count for one operator under a rule: ``N``, ``cin``, ``cin/N`` or ``ratio:R``.

    The result is always a common divisor of ``c_in`` and ``c_out``: ``N`` and
    ``cin/N`` round down to the nearest one.
    """
    rule = str(rule).strip().lower()
    common = math.gcd(c_in, c_out)
    if rule in ("cin", "dw"):
        target = c_in
    elif rule.startswith("cin/"):
        target = max(1, c_in // int(rule[4:]))
    elif rule.startswith("ratio:"):
        return choose_groups(common, stencil.points, float(rule[6:]))
    else:
        target = int(rule)
        if target < 1:
            raise ValueError(f"group count must be positive, got {rule}")
    return largest_divisor_at_most(common, target)


class Block:
    """One pre-activation residual step; ``transition`` widens and halves resolution."""

    def __init__(self, name, c_in, c_out, cfg: NetworkConfig, transition=False):
        self.name = name
        self.transition = transition
        kind = cfg.stencil_kind
        k1_kind, k2_kind = kind, kind
        if kind.is_three1d:
            k1_kind, k2_kind = StencilKind.THREE_H, StencilKind.THREE_V
        g1 = resolve_groups(cfg.group_rule, c_in, c_out, k1_kind)
        g2 = resolve_groups(cfg.group_rule, c_out, c_out, k2_kind)
        self.norm1 = BatchNorm(name + ".norm1", c_in)
        self.k1 = Conv(name + ".k1", c_in, c_out, g1, k1_kind, cfg.coupling)
        self.norm2 = BatchNorm(name + ".norm2", c_out)
        self.k2 = Conv(name + ".k2", c_out, c_out, g2, k2_kind, cfg.coupling)
        self.relu1, self.relu2 = ReLU(), ReLU()
        self.skip = Downsample(name + ".down", c_in, kind) if transition else None

    def convs(self):
        out = [self.k1, self.k2]
        if self.skip is not None:
            out.append(self.skip.conv)
        return out

    def norms(self):
        return [self.norm1, self.norm2]

    def forward(self, model: "LeanResNet", y: FeatureMap, train: bool) -> FeatureMap:
        p, buf, path = model.params, model.buffers, model.path
        h = self.relu1.forward(self.norm1.forward(p, buf, y, train))
        h = self.k1.forward(p, h, path)
        if self.transition:
            h = avg_pool2(h)
        h = self.relu2.forward(self.norm2.forward(p, buf, h, train))
        f = self.k2.forward(p, h, path)
        if model.transpose_probe:
            f = f.to_layout(f.layout.flipped()).to_layout(f.layout)
        skip = self.skip.forward(p, y) if self.transition else y
        return residual_add(skip, f.to_layout(skip.layout))

    def backward(self, model: "LeanResNet", d_out: FeatureMap) -> FeatureMap:
        p, g = model.params, model.grads
        d_f = d_out.to_layout(self._f_layout(model))
        d_h = self.k2.backward(p, g, d_f)
        d_h = self.norm2.backward(p, g, self.relu2.backward(d_h))
        if self.transition:
            d_h = avg_pool2_backward(d_h)
        d_h = self.k1.backward(p, g, d_h)
        d_y = self.norm1.backward(p, g, self.relu1.backward(d_h))
        if self.transition:
            d_skip = self.skip.backward(p, g, d_out)
        else:
            d_skip = d_out
        return residual_add(d_skip, d_y.to_layout(d_skip.layout))

    def _f_layout(self, model) -> Layout:
        # layout K2 produced in the forward pass
        x = self.k2._x
        if self.k2.stencil.is_three1d and model.path in ("auto", "fused"):
            return x.layout.flipped()
        return x.layout


class LeanResNet:
    def __init__(self, cfg: NetworkConfig, n_classes: int, dtype=np.float64, path: str = "auto"):
        cfg.validate()
        self.cfg = cfg
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)
        self.path = path
        self.transpose_probe = False
        self.params: dict = {}
        self.buffers: dict = {}
        self.grads: dict = {}

        first = cfg.stage_widths[0] // cfg.stage_strides[0]
        self.opening = Conv("opening", cfg.in_channels, first, 1, StencilKind.parse(cfg.opening_stencil), "lean")
        self.stages = []
        self.pre_downsamples = {}
        width = first
        for s, (w, steps, stride) in enumerate(zip(cfg.stage_widths, cfg.stage_steps, cfg.stage_strides)):
            blocks = []
            for j in range(steps):
                name = f"stage{s}.block{j}"
                if j == 0 and stride == 2:
                    if cfg.transition == "branch":
                        blocks.append(Block(name, width, w, cfg, transition=True))
                    else:
                        self.pre_downsamples[s] = Downsample(f"stage{s}.down", width, cfg.stencil_kind)
                        blocks.append(Block(name, w, w, cfg))
                else:
                    blocks.append(Block(name, w, w, cfg))
                width = w
            self.stages.append(blocks)
        self.out_width = width
        self._register()

    # --- registry -------------------------------------------------------

    def convs(self):
        out = [self.opening]
        for s, blocks in enumerate(self.stages):
            if s in self.pre_downsamples:
                out.append(self.pre_downsamples[s].conv)
            for blk in blocks:
                out.extend(blk.convs())
        return out

    def norms(self):
        return [n for blocks in self.stages for blk in blocks for n in blk.norms()]

    def blocks(self):
        return [blk for blocks in self.stages for blk in blocks]

    def _register(self):
        for conv in self.convs():
            tmpl = conv.template(self.dtype)
            self.params[conv.keys[0]] = tmpl.pointwise
            self.params[conv.keys[1]] = tmpl.spatial
        for norm in self.norms():
            self.params[norm.keys[0]] = np.ones(norm.channels, dtype=self.dtype)
            self.params[norm.keys[1]] = np.zeros(norm.channels, dtype=self.dtype)
            self.buffers[norm.buffer_keys[0]] = np.zeros(norm.channels, dtype=self.dtype)
            self.buffers[norm.buffer_keys[1]] = np.ones(norm.channels, dtype=self.dtype)
        self.params["classifier.W"] = np.zeros((self.n_classes, self.out_width), dtype=self.dtype)
        self.params["classifier.mu"] = np.zeros(self.n_classes, dtype=self.dtype)
        self.zero_grad()

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def initialize(self, rng=None, zero_convs: bool = False, k2_scale: float = 0.1) -> "LeanResNet":
        """Fan-in Gaussian init: variance ``2 / (param_count / c_out)``; K2 damped."""
        rng = np.random.default_rng(rng)
        k2_names = {blk.k2.name for blk in self.blocks()}
        for conv in self.convs():
            pw, sp = conv.keys
            if zero_convs and conv is not self.opening:
                self.params[pw] = np.zeros_like(self.params[pw])
                self.params[sp] = np.zeros_like(self.params[sp])
                continue
            fan_in = (self.params[pw].size + self.params[sp].size) / conv.c_out
            std = math.sqrt(2.0 / fan_in)
            if conv.name in k2_names:
                std *= k2_scale
            self.params[pw] = (std * rng.standard_normal(self.params[pw].shape)).astype(self.dtype)
            self.params[sp] = (std * rng.standard_normal(self.params[sp].shape)).astype(self.dtype)
        n_out = self.out_width
        self.params["classifier.W"] = (rng.standard_normal((self.n_classes, n_out)) / math.sqrt(n_out)).astype(self.dtype)
        self.params["classifier.mu"] = np.zeros(self.n_classes, dtype=self.dtype)
        return self

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def conv_layer_count(self) -> int:
        return len(self.convs())

    def weight_decay_keys(self):
        return [k for k in self.params if k.endswith((".pointwise", ".spatial")) or k == "classifier.W"]

    def conv_spec(self, conv: Conv):
        return conv.spec(self.params)

    # --- forward / backward ---------------------------------------------

    def _as_input(self, images) -> FeatureMap:
        if isinstance(images, FeatureMap):
            return images.astype(self.dtype) if images.dtype != self.dtype else images
        return FeatureMap.from_array(np.asarray(images), layout=Layout.WIDTH_FASTEST, dtype=self.dtype)

    def features(self, images, train: bool = False) -> np.ndarray:
        x = self.opening.forward(self.params, self._as_input(images), path="shift")
        for s, blocks in enumerate(self.stages):
            if s in self.pre_downsamples:
                x = self.pre_downsamples[s].forward(self.params, x)
            for blk in blocks:
                x = blk.forward(self, x, train)
        self._last_map = x
        return global_avg_pool(x)

    def logits(self, images, train: bool = False) -> np.ndarray:
        feats = self.features(images, train)
        self._feats = feats
        return feats @ self.params["classifier.W"].T + self.params["classifier.mu"]

    def predict_proba(self, images, train: bool = False) -> np.ndarray:
        return softmax(self.logits(images, train))

    def backward(self, d_logits: np.ndarray) -> None:
        """Accumulate gradients of a scalar loss given ``dL/dlogits``."""
        g = self.grads
        g["classifier.W"] += d_logits.T @ self._feats
        g["classifier.mu"] += d_logits.sum(axis=0)
        d_feats = d_logits @ self.params["classifier.W"]
        last = self._last_map
        hw = last.height * last.width
        d_map = np.broadcast_to((d_feats / hw)[:, :, None, None], last.data.shape)
        d = FeatureMap(np.array(d_map, dtype=self.dtype), last.layout)
        for s in reversed(range(len(self.stages))):
            for blk in reversed(self.stages[s]):
                d = blk.backward(self, d)
            if s in self.pre_downsamples:
                d = self.pre_downsamples[s].backward(self.params, g, d)
        self.opening.backward(self.params, g, d)

    def loss_and_grad(self, images, labels, train: bool = True):
        self.zero_grad()
        logits = self.logits(images, train)
        probs = softmax(logits)
        loss = cross_entropy(probs, labels)
        d_logits = probs.copy()
        d_logits[np.arange(len(labels)), labels] -= 1.0
        d_logits /= len(labels)
        self.backward(d_logits)
        return loss, probs

    # --- accounting -----------------------------------------------------

    def cost_table(self, height: int, width: int, batch: int = 1) -> list:
        """Per-layer rows of parameters and multiplications at an input size."""
        rows = []

        def conv_row(conv, h, w):
            spec = conv.spec(self.params)
            p = param_count(spec)
            rows.append({
                "layer": conv.name, "kind": "conv", "stencil": conv.stencil.value, "coupling": conv.coupling,
                "c_in": conv.c_in, "c_out": conv.c_out, "groups": conv.groups,
                "height": h, "width": w, "params": p, "mults": batch * h * w * p,
            })

        h, w = height, width
        conv_row(self.opening, h, w)
        for s, blocks in enumerate(self.stages):
            if s in self.pre_downsamples:
                conv_row(self.pre_downsamples[s].conv, h, w)
                h, w = h // 2, w // 2
            for blk in blocks:
                if blk.transition:
                    conv_row(blk.skip.conv, h, w)
                    conv_row(blk.k1, h, w)
                    h, w = h // 2, w // 2
                else:
                    conv_row(blk.k1, h, w)
                conv_row(blk.k2, h, w)
        for norm in self.norms():
            rows.append({
                "layer": norm.name, "kind": "norm", "stencil": "", "coupling": "",
                "c_in": norm.channels, "c_out": norm.channels, "groups": "",
                "height": "", "width": "", "params": 2 * norm.channels, "mults": 0,
            })
        n_w = self.params["classifier.W"].size
        rows.append({
            "layer": "classifier", "kind": "linear", "stencil": "", "coupling": "",
            "c_in": self.out_width, "c_out": self.n_classes, "groups": "",
            "height": "", "width": "", "params": n_w + self.n_classes, "mults": batch * n_w,
        })
        return rows

    def cost(self, height: int, width: int, batch: int = 1) -> CostReport:
        rows = self.cost_table(height, width, batch)
        return CostReport(sum(r["params"] for r in rows), sum(r["mults"] for r in rows))


def build_network(cfg: NetworkConfig, n_classes: int, dtype=np.float64, seed: Optional[int] = 0,
                  path: str = "auto", zero_convs: bool = False) -> LeanResNet:
    model = LeanResNet(cfg, n_classes, dtype=dtype, path=path)
    return model.initialize(seed, zero_convs=zero_convs)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classify(features: np.ndarray, W: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Class probabilities ``softmax(W y + mu)`` for a batch of pooled features."""
    features = np.atleast_2d(features)
    if features.shape[1] != W.shape[1] or W.shape[0] != mu.shape[0]:
        raise ShapeError(f"features {features.shape} do not fit classifier {W.shape}")
    return softmax(features @ W.T + mu)


def cross_entropy(probs: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    n_c = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_c):
        raise ValueError(f"labels must lie in [0, {n_c})")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(probs.dtype).tiny))))


def pointwise_probe_config(width: int = 16, in_channels: int = 1) -> NetworkConfig:
    """A network that only ever mixes channels per pixel before global pooling."""
    return NetworkConfig([width], [1], [1], stencil="1x1", group_rule="1", in_channels=in_channels,
                         opening_stencil="1x1")
