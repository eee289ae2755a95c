"""Dual-memory online video segmentation at desk scale.

A small numpy-backed tensor engine with reverse-mode autodiff underpins the
network blocks (bottleneck ConvLSTM, non-local attention reads), the two
temporal memories (FIFO local window, actively gated global store), a training
loop over synthetic moving-shape videos, and an efficiency harness reporting
parameter counts, FLOPs, and per-frame latency.
"""

from .tensor import (
    Tensor,
    FlopCounter,
    counter,
    no_grad,
    backward,
    finite_diff_check,
    conv2d,
    depthwise_conv2d,
    depthwise_separable_conv,
    elementwise,
    softmax,
    concat,
    matmul,
    DimensionError,
    ConfigError,
    FLOPS_PER_MAC,
)

__all__ = [
    "Tensor",
    "FlopCounter",
    "counter",
    "no_grad",
    "backward",
    "finite_diff_check",
    "conv2d",
    "depthwise_conv2d",
    "depthwise_separable_conv",
    "elementwise",
    "softmax",
    "concat",
    "matmul",
    "DimensionError",
    "ConfigError",
    "FLOPS_PER_MAC",
]
