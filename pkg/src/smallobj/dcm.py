"""Dilated-convolution Mish (DCM) enhancement block.

Layout::

    z  = mish(entry_1x1(x))
    y1 = stage(z,       d=2)
    y2 = stage(y1,      d=4)
    y3 = stage(y2,      d=8)
    y4 = stage(y3 + y1, d=4)
    y5 = stage(y4 + y2, d=2)
    out = x + exit_1x1(y5)

Every stage is a 3x3 conv with padding equal to its dilation followed by
mish, so the block never changes shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import ConvSpec, as_tensor, conv2d, init_conv, mish

DILATIONS = (2, 4, 8, 4, 2)
KERNEL = 3


@dataclass(frozen=True, eq=False)
class DcmParams:
    entry: ConvSpec
    stages: tuple[ConvSpec, ...]
    exit: ConvSpec

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if tuple(s.dilation for s in self.stages) != DILATIONS:
            raise ValueError(f"stage dilations must be {DILATIONS}")
        c = self.entry.in_channels
        for conv in (self.entry, *self.stages, self.exit):
            if conv.in_channels != c or conv.out_channels != c or conv.stride != 1:
                raise ValueError("DCM convs must keep the channel count and stride 1")
            if conv.padding != conv.dilation * (conv.kernel - 1) // 2:
                raise ValueError("DCM convs must preserve spatial size")
        if self.entry.kernel != 1 or self.exit.kernel != 1:
            raise ValueError("entry/exit fusion convs must be 1x1")
        if any(s.kernel != KERNEL for s in self.stages):
            raise ValueError("dilated stages must be 3x3")

    @property
    def channels(self) -> int:
        return self.entry.in_channels


# Without normalization layers, full-scale residual branches compound the
# activation scale stage after stage; the branch's last conv starts damped.
RESIDUAL_GAIN = 0.1


def init_dcm(rng: Rng, channels: int) -> DcmParams:
    stages = tuple(init_conv(rng.child(f"stage{i}"), channels, channels, KERNEL, dilation=d)
                   for i, d in enumerate(DILATIONS))
    return DcmParams(init_conv(rng.child("entry"), channels, channels), stages,
                     init_conv(rng.child("exit"), channels, channels, gain=RESIDUAL_GAIN))


def receptive_field(dilations=DILATIONS, kernel: int = KERNEL) -> int:
    return 1 + sum(d * (kernel - 1) for d in dilations)


def dcm_branch(x, params: DcmParams) -> np.ndarray:
    """The non-residual path (everything except the final ``x +``)."""
    x = as_tensor(x)
    if x.shape[0] != params.channels:
        raise ValueError(f"DCM built for {params.channels} channels, got {x.shape[0]}")
    s = params.stages
    z = mish(conv2d(x, params.entry))
    y1 = mish(conv2d(z, s[0]))
    y2 = mish(conv2d(y1, s[1]))
    y3 = mish(conv2d(y2, s[2]))
    y4 = mish(conv2d(y3 + y1, s[3]))
    y5 = mish(conv2d(y4 + y2, s[4]))
    return conv2d(y5, params.exit)


def dcm_forward(x, params: DcmParams) -> np.ndarray:
    x = as_tensor(x)
    return x + dcm_branch(x, params)
