"""Anchor-free center-point detector.

Backbone pyramid, top-down multi-scale fusion, detection heads, target
rendering, detection loss, and box decoding. Everything operates on
(batch, channel, height, width) tensors; boxes live in image pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

BACKBONE_STRIDES = (2, 4, 8, 16)
FUSED_STRIDE = 4


class InputSizeError(ValueError):
    """Image size incompatible with the backbone stride pyramid."""


class ZeroAreaBoxError(ValueError):
    """A ground-truth box with non-positive width or height."""


@dataclass
class FeatureMap:
    """Batched feature tensor plus its image-pixels-per-cell stride."""

    data: Tensor  # [N, C, H, W]
    stride: int


@dataclass
class Detection:
    """Center-form box in image pixels with a confidence score."""

    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float,
                  score: float = 1.0) -> "Detection":
        return cls(cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0,
                   w=x2 - x1, h=y2 - y1, score=score)


@dataclass
class DetectorOutputs:
    """Raw head outputs on the fused grid.

    center_heatmap is sigmoid-squashed; size_map holds (w, h) in grid
    units; offset_map holds (dx, dy) sub-cell center offsets.
    """

    center_heatmap: Tensor  # [N, 1, H, W]
    size_map: Tensor        # [N, 2, H, W]
    offset_map: Tensor      # [N, 2, H, W]


@dataclass
class GroundTruthTargets:
    heatmap_target: Tensor  # [N, 1, H, W], exactly 1 at positive cells
    size_target: Tensor     # [N, 2, H, W], (w, h) in grid units
    offset_target: Tensor   # [N, 2, H, W], fractional center remainder
    positive_mask: Tensor   # [N, H, W] bool


def _norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    if channels % groups != 0:
        raise ValueError(f"channel width {channels} not divisible by {groups} norm groups")
    return nn.GroupNorm(groups, channels)


class _Stage(nn.Sequential):
    """One backbone stage: stride-2 conv then a stride-1 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
            _norm(out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1),
            _norm(out_ch),
            nn.ReLU(),
        )


class Backbone(nn.Module):
    """Small 4-stage convolutional pyramid with strides 2/4/8/16.

    Expects images in [0, 1]; they are re-centered to [-1, 1] before the
    first convolution.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("backbone needs exactly 4 stage widths")
        self.widths = tuple(int(w) for w in widths)
        stages = []
        in_ch = 3
        for w in self.widths:
            stages.append(_Stage(in_ch, w))
            in_ch = w
        self.stages = nn.ModuleList(stages)

    def forward(self, image: Tensor) -> list[FeatureMap]:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected [N, 3, H, W] image batch, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % BACKBONE_STRIDES[-1] != 0 or w % BACKBONE_STRIDES[-1] != 0:
            raise InputSizeError(
                f"image size {h}x{w} must be divisible by {BACKBONE_STRIDES[-1]}")
        x = image * 2.0 - 1.0
        out = []
        for stage, stride in zip(self.stages, BACKBONE_STRIDES):
            x = stage(x)
            out.append(FeatureMap(x, stride))
        return out


class MultiScaleFusion(nn.Module):
    """Top-down sum pathway over the stride>=4 stages.

    1x1 lateral projections, nearest-neighbor upsampling, elementwise sum,
    and a final 3x3 smoothing conv. The stride-2 stem stage only feeds the
    deeper stages and is not fused, keeping the output at stride 4.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), out_width: int = 64):
        super().__init__()
        self.out_width = int(out_width)
        self.laterals = nn.ModuleList(
            nn.Conv2d(w, self.out_width, 1) for w in widths[1:]
        )
        self.smooth = nn.Conv2d(self.out_width, self.out_width, 3, padding=1)

    def forward(self, stages: Sequence[FeatureMap]) -> FeatureMap:
        if len(stages) != 4:
            raise ValueError(f"expected 4 pyramid stages, got {len(stages)}")
        strides = [s.stride for s in stages]
        if strides != sorted(strides) or strides != list(BACKBONE_STRIDES):
            raise ValueError(f"stages must have strides {BACKBONE_STRIDES}, got {strides}")
        batches = {s.data.shape[0] for s in stages}
        if len(batches) != 1:
            raise ValueError(f"mismatched batch sizes across stages: {sorted(batches)}")

        fused = stages[1:]
        x = self.laterals[-1](fused[-1].data)
        for level in range(len(fused) - 2, -1, -1):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = x + self.laterals[level](fused[level].data)
        return FeatureMap(self.smooth(x), FUSED_STRIDE)


class _HeadBranch(nn.Sequential):
    def __init__(self, in_ch: int, mid_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, mid_ch, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(mid_ch, out_ch, 1),
        )


class DetectionHeads(nn.Module):
    """Three parallel branches (center / size / offset), each 3x3 conv ->
    ReLU -> 1x1 conv; the center branch is squashed with a logistic map."""

    # rare-positive prior: start the center branch near p ~ 0.1
    CENTER_BIAS_INIT = -2.19

    def __init__(self, in_width: int, head_width: int = 64):
        super().__init__()
        self.center = _HeadBranch(in_width, head_width, 1)
        self.size = _HeadBranch(in_width, head_width, 2)
        self.offset = _HeadBranch(in_width, head_width, 2)
        nn.init.constant_(self.center[-1].bias, self.CENTER_BIAS_INIT)

    def forward(self, feature: FeatureMap) -> DetectorOutputs:
        x = feature.data
        return DetectorOutputs(
            center_heatmap=torch.sigmoid(self.center(x)),
            size_map=self.size(x),
            offset_map=self.offset(x),
        )


class CenterPointDetector(nn.Module):
    """Single-frame detector: backbone, fusion, and heads.

    ``extract_calls`` counts backbone invocations so callers can assert
    the one-pass-per-frame economy of sequential video inference.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128),
                 fusion_width: int = 64, head_width: int = 64):
        super().__init__()
        self.backbone = Backbone(widths)
        self.fusion = MultiScaleFusion(widths, fusion_width)
        self.heads = DetectionHeads(fusion_width, head_width)
        self.extract_calls = 0

    def extract(self, images: Tensor) -> FeatureMap:
        self.extract_calls += 1
        return self.fusion(self.backbone(images))

    def forward(self, images: Tensor) -> DetectorOutputs:
        return self.heads(self.extract(images))


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Radius (grid cells) such that any center within it keeps at least
    ``min_overlap`` IoU with the true box; minimum of the three quadratic
    cases."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    sq1 = math.sqrt(max(b1 * b1 - 4 * a1 * c1, 0.0))
    r1 = (b1 - sq1) / (2 * a1)

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    sq2 = math.sqrt(max(b2 * b2 - 4 * a2 * c2, 0.0))
    r2 = (b2 - sq2) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    sq3 = math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))
    r3 = (b3 + sq3) / (2 * a3)
    return min(r1, r2, r3)


def _draw_gaussian(heatmap: Tensor, row: int, col: int, radius: int) -> None:
    """Splat a Gaussian peak (value exactly 1 at the center) onto the map,
    combining with existing values by elementwise max."""
    h, w = heatmap.shape
    sigma = (2 * radius + 1) / 6.0
    ys = torch.arange(-radius, radius + 1, dtype=heatmap.dtype)
    gauss = torch.exp(-(ys.view(-1, 1) ** 2 + ys.view(1, -1) ** 2) / (2 * sigma * sigma))

    top = min(row, radius)
    bottom = min(h - 1 - row, radius)
    left = min(col, radius)
    right = min(w - 1 - col, radius)
    patch = heatmap[row - top: row + bottom + 1, col - left: col + right + 1]
    g = gauss[radius - top: radius + bottom + 1, radius - left: radius + right + 1]
    torch.maximum(patch, g, out=patch)


def render_targets(boxes: Sequence[Sequence[Detection]], grid_h: int, grid_w: int,
                   stride: int, min_overlap: float = 0.7) -> GroundTruthTargets:
    """Rasterize per-sample ground-truth boxes into supervision maps.

    Per box: a Gaussian splat on the heatmap centered at the box-center
    cell (overlaps combined by max), grid-unit (w, h) at the positive
    cell, and the fractional center remainder as the offset target.
    """
    n = len(boxes)
    heat = torch.zeros(n, 1, grid_h, grid_w)
    size = torch.zeros(n, 2, grid_h, grid_w)
    offset = torch.zeros(n, 2, grid_h, grid_w)
    positive = torch.zeros(n, grid_h, grid_w, dtype=torch.bool)

    for i, sample_boxes in enumerate(boxes):
        for box in sample_boxes:
            if box.w <= 0 or box.h <= 0:
                raise ZeroAreaBoxError(f"box with non-positive extent: {box}")
            gx = box.cx / stride
            gy = box.cy / stride
            col = int(gx)
            row = int(gy)
            if not (0 <= col < grid_w and 0 <= row < grid_h):
                raise ValueError(f"box center outside the grid: {box}")
            radius = max(0, int(gaussian_radius(box.h / stride, box.w / stride, min_overlap)))
            _draw_gaussian(heat[i, 0], row, col, radius)
            heat[i, 0, row, col] = 1.0
            size[i, 0, row, col] = box.w / stride
            size[i, 1, row, col] = box.h / stride
            offset[i, 0, row, col] = gx - col
            offset[i, 1, row, col] = gy - row
            positive[i, row, col] = True
    return GroundTruthTargets(heat, size, offset, positive)


def detection_loss(outputs: DetectorOutputs, targets: GroundTruthTargets,
                   size_weight: float = 0.1, offset_weight: float = 1.0,
                   ) -> dict[str, Tensor]:
    """Penalty-reduced focal center loss plus L1 size/offset terms.

    total = focal + size_weight * L1(size) + offset_weight * L1(offset);
    L1 terms read only positive cells and are averaged over the positive
    count (clamped to >= 1). A perfect 0/1 prediction yields exactly 0.
    """
    heat = outputs.center_heatmap
    target = targets.heatmap_target
    if heat.shape != target.shape:
        raise ValueError(f"heatmap shape {tuple(heat.shape)} != target {tuple(target.shape)}")

    pos = target.eq(1.0)
    num_pos = pos.sum().clamp(min=1).to(heat.dtype)
    eps = torch.finfo(heat.dtype).tiny
    # unclamped polynomial factors keep the perfect-prediction loss at 0 exactly
    pos_term = ((1 - heat) ** 2 * torch.log(heat.clamp(min=eps)))[pos].sum()
    neg_term = (((1 - target) ** 4) * heat ** 2 * torch.log((1 - heat).clamp(min=eps)))[~pos].sum()
    center = -(pos_term + neg_term) / num_pos

    mask = targets.positive_mask.unsqueeze(1).to(heat.dtype)
    n_cells = targets.positive_mask.sum().clamp(min=1).to(heat.dtype)
    size_l1 = ((outputs.size_map - targets.size_target).abs() * mask).sum() / n_cells
    offset_l1 = ((outputs.offset_map - targets.offset_target).abs() * mask).sum() / n_cells

    total = center + size_weight * size_l1 + offset_weight * offset_l1
    return {"center": center, "size": size_l1, "offset": offset_l1, "total": total}


def decode_detections(outputs: DetectorOutputs, stride: int, max_k: int = 100,
                      threshold: float = 0.0) -> list[list[Detection]]:
    """Decode head outputs into per-sample detection lists.

    Keeps 3x3 local maxima of the heatmap (ties kept), takes the top
    ``max_k`` by score (stable row-major order on ties), then drops
    scores below ``threshold``. Scores are raw heatmap values; extents
    are clamped to a small positive floor.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    heat = outputs.center_heatmap
    n, _, grid_h, grid_w = heat.shape
    pooled = F.max_pool2d(heat, 3, stride=1, padding=1)
    keep = heat == pooled

    results: list[list[Detection]] = []
    for i in range(n):
        flat_scores = heat[i, 0].flatten()
        kept_idx = keep[i, 0].flatten().nonzero(as_tuple=False).squeeze(1)
        if kept_idx.numel() == 0:
            results.append([])
            continue
        kept_scores = flat_scores[kept_idx]
        order = torch.argsort(-kept_scores, stable=True)[:max_k]
        dets: list[Detection] = []
        for j in order.tolist():
            score = float(kept_scores[j])
            if score < threshold:
                continue
            idx = int(kept_idx[j])
            row, col = idx // grid_w, idx % grid_w
            dx = float(outputs.offset_map[i, 0, row, col])
            dy = float(outputs.offset_map[i, 1, row, col])
            w = max(float(outputs.size_map[i, 0, row, col]) * stride, 1e-6)
            h = max(float(outputs.size_map[i, 1, row, col]) * stride, 1e-6)
            dets.append(Detection(cx=(col + dx) * stride, cy=(row + dy) * stride,
                                  w=w, h=h, score=score))
        results.append(dets)
    return results
