"""Convolutional block attention: channel attention, then spatial attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (ConvSpec, as_tensor, concat_channels, conv2d, global_pool,
                     init_conv, linear, relu, sigmoid)

DEFAULT_REDUCTION = 16


@dataclass(frozen=True, eq=False)
class CbamParams:
    """Shared MLP ``w1 @ relu(w0 @ v + b0) + b1`` and a 2->1 3x3 spatial conv."""

    w0: np.ndarray  # (hidden, C)
    b0: np.ndarray
    w1: np.ndarray  # (C, hidden)
    b1: np.ndarray
    spatial: ConvSpec

    def __post_init__(self):
        for name in ("w0", "b0", "w1", "b1"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        hidden, c = self.w0.shape
        if self.w1.shape != (c, hidden) or self.b0.shape != (hidden,) or self.b1.shape != (c,):
            raise ValueError("inconsistent CBAM MLP shapes")
        sp = self.spatial
        if (sp.in_channels, sp.out_channels, sp.kernel) != (2, 1, 3):
            raise ValueError("spatial attention conv must be 3x3 with 2 inputs and 1 output")

    @property
    def channels(self) -> int:
        return self.w0.shape[1]

    @property
    def hidden(self) -> int:
        return self.w0.shape[0]


def hidden_size(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
    return max(1, channels // reduction)


def init_cbam(rng: Rng, channels: int, reduction: int = DEFAULT_REDUCTION) -> CbamParams:
    h = hidden_size(channels, reduction)
    w0 = init_conv(rng.child("w0"), channels, h).weights[:, :, 0, 0]
    w1 = init_conv(rng.child("w1"), h, channels).weights[:, :, 0, 0]
    spatial = init_conv(rng.child("spatial"), 2, 1, kernel=3, padding=1)
    return CbamParams(w0, np.zeros(h), w1, np.zeros(channels), spatial)


def shared_mlp(v, params: CbamParams) -> np.ndarray:
    return linear(relu(linear(v, params.w0, params.b0)), params.w1, params.b1)


def channel_attention(x, params: CbamParams) -> np.ndarray:
    """Per-channel weights in (0, 1), shape ``(C,)``."""
    x = as_tensor(x)
    if x.shape[0] != params.channels:
        raise ValueError(f"CBAM built for {params.channels} channels, got {x.shape[0]}")
    a = shared_mlp(global_pool(x, "avg"), params)
    m = shared_mlp(global_pool(x, "max"), params)
    return sigmoid(a + m)


def spatial_attention(x, params: CbamParams) -> np.ndarray:
    """Attention map of shape ``(1, H, W)`` in (0, 1)."""
    x = as_tensor(x)
    pooled = concat_channels([x.mean(axis=0, keepdims=True), x.max(axis=0, keepdims=True)])
    return sigmoid(conv2d(pooled, params.spatial))


def cbam_apply(x, params: CbamParams) -> np.ndarray:
    x = as_tensor(x)
    x = x * channel_attention(x, params)[:, None, None]
    return x * spatial_attention(x, params)
