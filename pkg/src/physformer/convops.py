"""Convolutional building blocks for video feature maps.

All functions are pure in (input, parameters) and differentiable through
the tensor engine. The temporal difference convolution augments a plain
3x3x3 convolution with a term that subtracts the center value scaled by
the summed adjacent-frame kernel mass:

    out = conv(x) + theta * (-x(center) * sum_adjacent(w))

The adjacent tap set is the 18 offsets of the 3x3x3 cube whose temporal
offset is nonzero, i.e. the two neighboring-frame 3x3 patches including
their spatial centers. With theta = 0 the vanilla convolution is
returned unchanged. The convention everywhere is cross-correlation (no
kernel flipping), which is what the loop oracles in the tests compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Conv3dParams",
    "TdcParams",
    "conv3d",
    "tdc",
    "maxpool_spatial",
    "upsample_temporal",
    "he_conv_params",
]


@dataclass
class Conv3dParams:
    """Weights for one 3-d convolution.

    ``weight`` is (out, in, kT, kH, kW); depthwise layers use
    (channels, 1, kT, kH, kW) and apply each slice to its own channel.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    depthwise: bool = False

    @property
    def kernel(self) -> tuple[int, int, int]:
        return tuple(self.weight.shape[2:])


@dataclass
class TdcParams:
    """A 3x3x3 convolution plus the temporal-difference mixing factor."""

    conv: Conv3dParams
    theta: float = 0.7

    def __post_init__(self):
        if self.conv.kernel != (3, 3, 3):
            raise ValueError(f"temporal difference conv needs a 3x3x3 kernel, got {self.conv.kernel}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")


def conv3d(x: Tensor, params: Conv3dParams) -> Tensor:
    """Standard cross-correlation with zero padding."""
    return T.conv3d(x, params.weight, params.bias, params.stride,
                    params.padding, params.depthwise)


def tdc(x: Tensor, params: TdcParams) -> Tensor:
    """Temporal difference convolution.

    The difference term multiplies the in-bounds center value by the sum
    of the adjacent-frame weights, evaluated on the same output grid and
    without a second bias.
    """
    base = conv3d(x, params.conv)
    if params.theta == 0.0:
        return base
    weight = params.conv.weight
    out_ch, in_ch = weight.shape[0], weight.shape[1]
    # taps at temporal offsets -1 and +1; kernel index 1 is the center frame
    adjacent = weight[:, :, ::2, :, :]
    mass = adjacent.sum((2, 3, 4)).reshape((out_ch, in_ch, 1, 1, 1))
    # window center for output index i sits at input coordinate i*stride + 1 - pad
    slices = []
    for axis in range(3):
        start = 1 - params.conv.padding[axis]
        step = params.conv.stride[axis]
        count = base.shape[2 + axis]
        if start < 0 or start + (count - 1) * step >= x.shape[2 + axis]:
            raise ValueError(
                f"temporal difference term needs in-bounds window centers; padding "
                f"{params.conv.padding} puts some centers outside input {x.shape}")
        slices.append(slice(start, start + (count - 1) * step + 1, step))
    centers = x[:, :, slices[0], slices[1], slices[2]]
    difference = T.conv3d(centers, mass, None, (1, 1, 1), (0, 0, 0), params.conv.depthwise)
    return base - params.theta * difference


def maxpool_spatial(x: Tensor) -> Tensor:
    """1x2x2 max pooling; T unchanged, H and W halved."""
    return T.maxpool_spatial(x)


def upsample_temporal(x: Tensor, factor: int, conv: Conv3dParams) -> Tensor:
    """Nearest-neighbor temporal upsampling followed by a 3x1x1 convolution.

    The convolution pads by replicating the first and last frame, so a
    constant input stays constant under an averaging kernel.
    """
    if int(factor) < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if conv.kernel != (3, 1, 1):
        raise ValueError(f"upsample conv needs a 3x1x1 kernel, got {conv.kernel}")
    out = T.repeat_temporal(x, int(factor))
    out = T.pad_temporal_replicate(out, 1)
    return T.conv3d(out, conv.weight, conv.bias, (1, 1, 1), (0, 0, 0), conv.depthwise)


def he_conv_params(rng: np.random.Generator, out_channels: int, in_channels: int,
                   kernel: tuple[int, int, int],
                   stride: tuple[int, int, int] = (1, 1, 1),
                   padding: tuple[int, int, int] = (0, 0, 0),
                   depthwise: bool = False, bias: bool = True,
                   weight_scale: float = 1.0) -> Conv3dParams:
    """Kaiming-style initialization; fan-in counts the kernel volume."""
    k_t, k_h, k_w = kernel
    if depthwise:
        shape = (out_channels, 1, k_t, k_h, k_w)
        fan_in = k_t * k_h * k_w
    else:
        shape = (out_channels, in_channels, k_t, k_h, k_w)
        fan_in = in_channels * k_t * k_h * k_w
    std = weight_scale * np.sqrt(2.0 / fan_in)
    weight = Tensor(std * rng.standard_normal(shape), requires_grad=True)
    bias_t = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
    return Conv3dParams(weight=weight, bias=bias_t, stride=stride,
                        padding=padding, depthwise=depthwise)
