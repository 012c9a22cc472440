"""Dense (C, H, W) feature maps and the primitive ops the detector is built from.

A feature map is a plain float64 ``numpy.ndarray`` of shape
``(channels, height, width)``; there is no batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

LEAKY_SLOPE = 0.1


def as_tensor(x, name: str = "x") -> np.ndarray:
    t = np.asarray(x, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"{name} must have shape (C, H, W), got {t.shape}")
    if min(t.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {t.shape}")
    return t


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Weights ``(out, in, k, k)`` and bias ``(out,)`` plus the conv geometry."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weights must be (out, in, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        b = _frozen(self.bias)
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("need stride >= 1, dilation >= 1, padding >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def num_params(self) -> int:
        return self.weights.size + self.bias.size

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        args = (self.kernel, self.stride, self.padding, self.dilation)
        return conv_output_size(height, *args), conv_output_size(width, *args)


def init_conv(rng: Rng, in_channels: int, out_channels: int, kernel: int = 1,
              stride: int = 1, padding: int | None = None,
              dilation: int = 1, gain: float = 1.0) -> ConvSpec:
    """He-uniform weights (fan-in scaled, times ``gain``), zero bias.

    Weights are rounded to float32 so a save/load round trip is exact.
    ``padding=None`` picks "same" padding for stride 1.
    """
    if padding is None:
        padding = dilation * (kernel - 1) // 2
    fan_in = in_channels * kernel * kernel
    bound = gain * np.sqrt(6.0 / fan_in)
    n = out_channels * in_channels * kernel * kernel
    w = rng.uniform(-bound, bound, n).astype(np.float32).astype(np.float64)
    return ConvSpec(w.reshape(out_channels, in_channels, kernel, kernel),
                    np.zeros(out_channels), stride, padding, dilation)


def conv2d(x, spec: ConvSpec) -> np.ndarray:
    """Direct convolution: one (out, in) @ (in, Ho*Wo) product per kernel tap."""
    x = as_tensor(x)
    c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"conv expects {spec.in_channels} input channels, got {c}")
    ho, wo = spec.output_shape(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv output would be {ho}x{wo} for a {h}x{w} input")
    k, s, d, p = spec.kernel, spec.stride, spec.dilation, spec.padding
    if k == 1 and s == 1 and p == 0:
        out = spec.weights[:, :, 0, 0] @ x.reshape(c, -1)
    else:
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        out = np.zeros((spec.out_channels, ho * wo))
        for ky in range(k):
            for kx in range(k):
                oy, ox = ky * d, kx * d
                patch = xp[:, oy:oy + s * (ho - 1) + 1:s, ox:ox + s * (wo - 1) + 1:s]
                out += spec.weights[:, :, ky, kx] @ patch.reshape(c, -1)
    out += spec.bias[:, None]
    return out.reshape(spec.out_channels, ho, wo)


def pool2d(x, kind: str = "max", window: int = 2, stride: int | None = None) -> np.ndarray:
    x = as_tensor(x)
    stride = window if stride is None else stride
    c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than input {h}x{w}")
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = None
    for dy in range(window):
        for dx in range(window):
            v = x[:, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride]
            if out is None:
                out = v.copy()
            elif kind == "max":
                np.maximum(out, v, out=out)
            else:
                out += v
    if kind == "avg":
        out /= window * window
    return out


def global_pool(x, kind: str = "avg") -> np.ndarray:
    x = as_tensor(x)
    flat = x.reshape(x.shape[0], -1)
    if kind == "max":
        return flat.max(axis=1)
    if kind == "avg":
        return flat.mean(axis=1)
    raise ValueError(f"unknown pool kind {kind!r}")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def mish(x):
    x = np.asarray(x, dtype=np.float64)
    return x * np.tanh(softplus(x))


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "mish": mish,
    "linear": lambda x: np.asarray(x, dtype=np.float64),
}


def activation(x, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def upsample_nearest(x, factor: int = 2) -> np.ndarray:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be positive, got {factor}")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def concat_channels(xs) -> np.ndarray:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("nothing to concatenate")
    hw = {x.shape[1:] for x in xs}
    if len(hw) != 1:
        raise ValueError(f"spatial sizes differ: {sorted(hw)}")
    return np.concatenate(xs, axis=0)


def l2_normalize(x, scale=1.0, eps: float = 1e-10) -> np.ndarray:
    """Unit-normalize the channel vector at every pixel, then scale per channel."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x * x, axis=0, keepdims=True))
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (x.shape[0],))
    return x / np.maximum(norm, eps) * scale[:, None, None]


def linear(v, weights, bias) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or v.shape != (weights.shape[1],) or bias.shape != (weights.shape[0],):
        raise ValueError(
            f"linear shapes disagree: v {v.shape}, weights {weights.shape}, bias {bias.shape}")
    return weights @ v + bias
