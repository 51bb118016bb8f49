"""Cross-frame box-masked contrastive training.

Anchor and reference features are concatenated along the batch axis;
foreground and background channel patterns are pooled per sample under the
box masks; every foreground pattern becomes a query scored by InfoNCE
against one other foreground (positive) and all backgrounds (negatives).
Training-only: nothing here runs at inference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .temporal_alignment import masked_channel_pool, normalize_pattern

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.07
DEFAULT_WEIGHT = 0.3


@dataclass
class PatternBank:
    """Pooled channel patterns keyed by concatenated-batch sample index."""

    foreground: list[tuple[int, Tensor]]
    background: list[tuple[int, Tensor]]


def concat_cross_frame(anchor_features: Tensor, reference_features: Tensor,
                       anchor_masks: Tensor, reference_masks: Tensor,
                       ) -> tuple[Tensor, Tensor]:
    """Stack anchor then reference along the batch axis (size 2N).

    Masks rows for frames without boxes are all zeros; splitting the
    result at N recovers the inputs bitwise.
    """
    if anchor_features.shape != reference_features.shape:
        raise ValueError(
            f"anchor/reference shapes differ: {tuple(anchor_features.shape)} vs "
            f"{tuple(reference_features.shape)}")
    features = torch.cat([anchor_features, reference_features], dim=0)
    masks = torch.cat([anchor_masks, reference_masks], dim=0)
    return features, masks


def extract_pattern_bank(features: Tensor, masks: Tensor) -> PatternBank:
    """Pool one foreground and one background pattern per sample where the
    corresponding region is nonempty; both min-max normalized."""
    fg: list[tuple[int, Tensor]] = []
    bg: list[tuple[int, Tensor]] = []
    for i in range(features.shape[0]):
        mask = masks[i]
        if mask.sum() > 0:
            fg.append((i, normalize_pattern(masked_channel_pool(features[i], mask))))
        inverse = 1.0 - mask
        if inverse.sum() > 0:
            bg.append((i, normalize_pattern(masked_channel_pool(features[i], inverse))))
    return PatternBank(foreground=fg, background=bg)


def sample_pairs(bank: PatternBank, rng: np.random.Generator,
                 ) -> list[tuple[Tensor, Tensor, list[Tensor]]]:
    """One (query, positive, negatives) tuple per foreground pattern.

    The positive is drawn uniformly from the other foregrounds; negatives
    are the entire background list. Fewer than 2 foregrounds or zero
    backgrounds yields an empty list (zero loss contribution).
    """
    fg = bank.foreground
    if len(fg) < 2 or not bank.background:
        logger.debug("contrastive sampling skipped: %d foregrounds, %d backgrounds",
                     len(fg), len(bank.background))
        return []
    negatives = [pattern for _, pattern in bank.background]
    tuples = []
    for j, (_, query) in enumerate(fg):
        others = [pattern for k, (_, pattern) in enumerate(fg) if k != j]
        positive = others[int(rng.integers(len(others)))]
        tuples.append((query, positive, negatives))
    return tuples


def info_nce(query: Tensor, positive: Tensor, negatives: list[Tensor],
             temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Softmax cross-entropy pulling the query toward its positive.

    Patterns are L2-normalized before the dot products; the log-sum-exp is
    computed in the max-shifted form for stability.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not negatives:
        raise ValueError("info_nce needs at least one negative")
    q = F.normalize(query, dim=0)
    keys = F.normalize(torch.stack([positive] + list(negatives)), dim=1)
    logits = keys @ q / temperature
    return torch.logsumexp(logits, dim=0) - logits[0]


def contrastive_loss(tuples: list[tuple[Tensor, Tensor, list[Tensor]]],
                     temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Mean per-query InfoNCE; an empty tuple list contributes 0."""
    if not tuples:
        return torch.zeros(())
    losses = [info_nce(q, pos, negs, temperature) for q, pos, negs in tuples]
    return torch.stack(losses).mean()
