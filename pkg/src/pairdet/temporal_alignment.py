"""Foreground temporal alignment between an anchor frame and its reference.

Masked channel pooling to a [0, 1] pattern, exp-cosine adaptive weighting,
channel-attention fusion with a skip connection, and the confidence gate
that decides whether alignment runs at all.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
from torch import Tensor

from .detection_core import Detection

logger = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_THRESHOLD = 0.6


class EmptyMaskError(ValueError):
    """Masked pooling over a mask with no foreground pixels."""


class MaskSource(str, Enum):
    GROUND_TRUTH = "ground_truth"
    DETECTED = "detected"
    ABSENT = "absent"


@dataclass
class BinaryMask:
    """Feature-resolution {0, 1} foreground mask.

    ``source`` records where the boxes came from; an ABSENT mask is
    unusable and alignment must be skipped.
    """

    data: Tensor  # [H, W] float of 0/1
    source: MaskSource

    @classmethod
    def absent(cls, grid_h: int, grid_w: int) -> "BinaryMask":
        return cls(torch.zeros(grid_h, grid_w), MaskSource.ABSENT)

    @property
    def usable(self) -> bool:
        return self.source is not MaskSource.ABSENT


def masked_channel_pool(feature: Tensor, mask: Tensor) -> Tensor:
    """Mean of each channel over the mask's foreground pixels.

    feature: [C, H, W]; mask: [H, W] of {0, 1}. Raises EmptyMaskError on
    an all-zero mask (callers must gate).
    """
    if feature.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"spatial size mismatch: feature {tuple(feature.shape[-2:])} vs "
            f"mask {tuple(mask.shape[-2:])}")
    m = mask.to(feature.dtype)
    count = m.sum()
    if count == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return (feature * m).sum(dim=(-2, -1)) / count


def normalize_pattern(raw: Tensor) -> Tensor:
    """Min-max normalize a channel vector to [0, 1].

    A constant vector maps to all zeros, which makes downstream fusion
    collapse to identity.
    """
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return torch.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def similarity_weight(pattern_r: Tensor, pattern_a: Tensor) -> Tensor:
    """exp(cosine similarity) between two channel patterns.

    Zero-norm inputs are treated as cosine 0 (weight 1) so training stays
    alive on dead features.
    """
    norm_r = torch.linalg.vector_norm(pattern_r)
    norm_a = torch.linalg.vector_norm(pattern_a)
    if norm_r == 0 or norm_a == 0:
        logger.debug("zero-norm channel pattern; adaptive weight defaults to 1")
        return torch.ones((), dtype=pattern_r.dtype, device=pattern_r.device)
    cos = torch.dot(pattern_r, pattern_a) / (norm_r * norm_a)
    return torch.exp(cos)


def fta_fuse(feature: Tensor, pattern: Tensor, alpha: Tensor | float) -> Tensor:
    """Channel re-weighting with a skip connection.

    out(c, x, y) = alpha * pattern(c) * feature(c, x, y) + feature(c, x, y);
    the pattern is broadcast over all spatial positions.
    """
    if feature.shape[0] != pattern.shape[0]:
        raise ValueError(
            f"channel mismatch: feature has {feature.shape[0]}, pattern {pattern.shape[0]}")
    return feature * (1.0 + alpha * pattern.view(-1, 1, 1))


def apply_fta(anchor_feature: Tensor, reference_feature: Tensor, mask: BinaryMask,
              adaptive: bool = True) -> tuple[Tensor, Tensor | None]:
    """Full alignment for one sample: pool, normalize, weight, fuse.

    Returns the (possibly identical) feature and the adaptive weight used,
    or None when the mask is absent and the input is passed through
    untouched. The reference mask pools both patterns: the anchor's own
    boxes are unknown at inference time.
    """
    if not mask.usable:
        return anchor_feature, None
    f_r = normalize_pattern(masked_channel_pool(reference_feature, mask.data))
    if adaptive:
        f_a = normalize_pattern(masked_channel_pool(anchor_feature, mask.data))
        alpha = similarity_weight(f_r, f_a)
    else:
        alpha = torch.ones((), dtype=anchor_feature.dtype, device=anchor_feature.device)
    return fta_fuse(anchor_feature, f_r, alpha), alpha


def rasterize_boxes(boxes: Sequence[Detection], grid_h: int, grid_w: int,
                    stride: int) -> Tensor:
    """Feature-grid mask of cells whose centers fall inside any box."""
    mask = torch.zeros(grid_h, grid_w)
    xs = (torch.arange(grid_w, dtype=torch.float64) + 0.5) * stride
    ys = (torch.arange(grid_h, dtype=torch.float64) + 0.5) * stride
    for box in boxes:
        x1, y1, x2, y2 = box.as_xyxy()
        inside = ((ys >= y1) & (ys < y2)).view(-1, 1) & ((xs >= x1) & (xs < x2)).view(1, -1)
        mask[inside] = 1.0
    return mask


def fta_gate(reference_detections: Sequence[Detection], grid_h: int, grid_w: int,
             stride: int, threshold: float = DEFAULT_CONFIDENCE_THRESHOLD) -> BinaryMask:
    """Inference-time gate: rasterize detections scoring strictly above the
    confidence threshold; no validated box (or an empty rasterization)
    yields an ABSENT mask and alignment is skipped."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    validated = [d for d in reference_detections if d.score > threshold]
    if not validated:
        return BinaryMask.absent(grid_h, grid_w)
    mask = rasterize_boxes(validated, grid_h, grid_w, stride)
    if mask.sum() == 0:
        return BinaryMask.absent(grid_h, grid_w)
    return BinaryMask(mask, MaskSource.DETECTED)


def ground_truth_mask(boxes: Sequence[Detection], grid_h: int, grid_w: int,
                      stride: int) -> BinaryMask:
    """Training-time mask from ground-truth boxes; ABSENT when the frame
    has no boxes or none covers a cell center."""
    if not boxes:
        return BinaryMask.absent(grid_h, grid_w)
    mask = rasterize_boxes(boxes, grid_h, grid_w, stride)
    if mask.sum() == 0:
        return BinaryMask.absent(grid_h, grid_w)
    return BinaryMask(mask, MaskSource.GROUND_TRUTH)
