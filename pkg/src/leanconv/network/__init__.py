"""Residual networks built from lean convolutions."""

from .layers import BN_EPS, BN_MOMENTUM, BatchNorm, Conv, Downsample, ReLU, downsample
from .model import (
    TABLE_I,
    LeanResNet,
    NetworkConfig,
    build_network,
    classify,
    cross_entropy,
    resolve_groups,
    softmax,
    table_config,
)
