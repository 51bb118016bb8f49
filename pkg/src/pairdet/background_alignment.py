"""Background dynamic alignment.

The inter-frame feature difference is projected by a zero-initialized 1x1
convolution into a dynamic field of per-cell sampling offsets, which a 3x3
deformable convolution consumes to re-sample the enhanced anchor feature.
The deformable convolution is implemented directly with differentiable
bilinear gathering (zero padding outside the grid, single offset group).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

KERNEL_SIZE = 3
NUM_TAPS = KERNEL_SIZE * KERNEL_SIZE
OFFSET_CHANNELS = 2 * NUM_TAPS  # interleaved (dy, dx) per tap


def bilinear_sample(data: Tensor, y: float, x: float, channel: int = 0,
                    sample: int = 0) -> float:
    """Zero-padded bilinear lookup on a [N, C, H, W] tensor at (y, x).

    The value is the weighted sum of the <= 4 surrounding grid nodes;
    out-of-grid neighbors contribute 0, so positions fully outside return 0.
    """
    plane = data[sample, channel]
    h, w = plane.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    wy = y - y0
    wx = x - x0
    acc = 0.0
    for dy, weight_y in ((0, 1.0 - wy), (1, wy)):
        for dx, weight_x in ((0, 1.0 - wx), (1, wx)):
            yi, xi = y0 + dy, x0 + dx
            if 0 <= yi < h and 0 <= xi < w:
                acc += weight_y * weight_x * float(plane[yi, xi])
    return acc


def _tap_offsets(dtype: torch.dtype, device: torch.device) -> tuple[Tensor, Tensor]:
    """Canonical (dy, dx) of the 9 kernel taps, row-major."""
    r = torch.arange(-1, 2, dtype=dtype, device=device)
    dy = r.repeat_interleave(KERNEL_SIZE)
    dx = r.repeat(KERNEL_SIZE)
    return dy, dx


def deformable_conv3x3(feature: Tensor, offsets: Tensor, weight: Tensor,
                       bias: Tensor | None = None) -> Tensor:
    """3x3 deformable convolution with learned per-cell tap offsets.

    feature: [N, C, H, W]; offsets: [N, 18, H, W] as 9 interleaved
    (dy, dx) pairs in feature-cell units; weight: [Co, C, 3, 3]. Sampling
    at fractional positions is bilinear; samples outside the grid read 0,
    matching the zero padding of a standard convolution.
    """
    n, c, h, w = feature.shape
    if offsets.shape != (n, OFFSET_CHANNELS, h, w):
        raise ValueError(
            f"offsets must be [N, {OFFSET_CHANNELS}, H, W] matching the feature; "
            f"got {tuple(offsets.shape)} for feature {tuple(feature.shape)}")
    dtype, device = feature.dtype, feature.device

    off = offsets.view(n, NUM_TAPS, 2, h, w)
    tap_dy, tap_dx = _tap_offsets(dtype, device)
    base_y = torch.arange(h, dtype=dtype, device=device).view(1, 1, h, 1)
    base_x = torch.arange(w, dtype=dtype, device=device).view(1, 1, 1, w)
    ys = base_y + tap_dy.view(1, NUM_TAPS, 1, 1) + off[:, :, 0]
    xs = base_x + tap_dx.view(1, NUM_TAPS, 1, 1) + off[:, :, 1]

    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    wy = ys - y0
    wx = xs - x0

    sampled = torch.zeros(n, c, NUM_TAPS, h, w, dtype=dtype, device=device)
    flat = feature.view(n, c, h * w)
    for dy, weight_y in ((0, 1.0 - wy), (1, wy)):
        for dx, weight_x in ((0, 1.0 - wx), (1, wx)):
            yi = y0 + dy
            xi = x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long()
            corner = torch.gather(
                flat.unsqueeze(2).expand(n, c, NUM_TAPS, h * w),
                3,
                idx.view(n, 1, NUM_TAPS, h * w).expand(n, c, NUM_TAPS, h * w),
            ).view(n, c, NUM_TAPS, h, w)
            sampled = sampled + corner * (weight_y * weight_x * valid.to(dtype)).unsqueeze(1)

    out = torch.einsum("nckhw,ock->nohw", sampled, weight.reshape(weight.shape[0], c, NUM_TAPS))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DynamicFieldConv(nn.Module):
    """1x1 projection of the inter-frame difference into sampling offsets.

    Weights and bias start at zero, so the downstream deformable
    convolution initially equals a standard 3x3 convolution.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.project = nn.Conv2d(channels, OFFSET_CHANNELS, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, enhanced: Tensor, reference: Tensor) -> Tensor:
        if enhanced.shape != reference.shape:
            raise ValueError(
                f"shape mismatch: {tuple(enhanced.shape)} vs {tuple(reference.shape)}")
        return self.project(enhanced - reference)


class DeformableAlign(nn.Module):
    """3x3 deformable convolution whose offsets come from a dynamic field."""

    def __init__(self, channels: int):
        super().__init__()
        # plain Conv2d holds the kernel so init matches a standard conv
        self.kernel = nn.Conv2d(channels, channels, KERNEL_SIZE, padding=1)

    def forward(self, feature: Tensor, offsets: Tensor) -> Tensor:
        return deformable_conv3x3(feature, offsets, self.kernel.weight, self.kernel.bias)

    def standard_conv(self, feature: Tensor) -> Tensor:
        """Reference path: the same kernel as an ordinary convolution."""
        return F.conv2d(feature, self.kernel.weight, self.kernel.bias, padding=1)


class BackgroundAlignment(nn.Module):
    """Dynamic field generation followed by deformable re-sampling."""

    def __init__(self, channels: int):
        super().__init__()
        self.field = DynamicFieldConv(channels)
        self.align = DeformableAlign(channels)

    def forward(self, enhanced: Tensor, reference: Tensor) -> Tensor:
        return self.align(enhanced, self.field(enhanced, reference))
