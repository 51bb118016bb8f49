"""End-to-end orchestration.

Training couples the detection loss with the cross-frame contrastive term
(L = L_detection + weight * L_contrast); inference walks a video
sequentially, reusing each frame's features as the next frame's reference
and gating foreground alignment on validated detections. All randomness
flows from the config seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .background_alignment import BackgroundAlignment
from .config import PipelineConfig, config_from_dict, config_to_dict
from .contrastive import (concat_cross_frame, contrastive_loss,
                          extract_pattern_bank, sample_pairs)
from .dataset import VideoSequence
from .detection_core import (CenterPointDetector, Detection, DetectorOutputs,
                             FeatureMap, decode_detections, detection_loss,
                             render_targets)
from .temporal_alignment import (BinaryMask, MaskSource, apply_fta, fta_gate,
                                 ground_truth_mask)


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incomplete checkpoint file."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture differs from the requested configuration."""


@dataclass
class FramePair:
    """Anchor frame with its temporally preceding reference frame.

    Images are float [3, H, W] tensors in [0, 1]; boxes are ground-truth
    detections with score 1.
    """

    anchor_image: Tensor
    reference_image: Tensor
    anchor_boxes: list[Detection] = field(default_factory=list)
    reference_boxes: list[Detection] = field(default_factory=list)


@dataclass
class PairForwardResult:
    outputs: DetectorOutputs
    anchor_feature: FeatureMap
    reference_feature: FeatureMap | None
    alphas: list[Tensor | None]


class PairDetector(nn.Module):
    """Base detector plus the two alignment stages, with ablation switches.

    All submodules are always constructed (so checkpoints stay compatible
    across switch settings and parameter init is independent of them);
    switches only control the forward path.
    """

    def __init__(self, config: PipelineConfig):
        super().__init__()
        m = config.model
        self.detector = CenterPointDetector(m.backbone_widths, m.fusion_width, m.head_width)
        self.bda = BackgroundAlignment(m.fusion_width)
        self.fta_enabled = config.fta.enabled
        self.adaptive_weight = config.fta.adaptive_weight
        self.bda_enabled = config.bda.enabled

    @property
    def uses_reference(self) -> bool:
        return self.fta_enabled or self.bda_enabled

    def align(self, anchor: FeatureMap, reference: FeatureMap | None,
              reference_masks: Sequence[BinaryMask] | None,
              ) -> tuple[Tensor, list[Tensor | None]]:
        """Run the enabled alignment stages on already-extracted features."""
        x = anchor.data
        alphas: list[Tensor | None] = [None] * x.shape[0]
        if self.fta_enabled and reference is not None and reference_masks is not None:
            rows = []
            for i in range(x.shape[0]):
                fused, alpha = apply_fta(x[i], reference.data[i], reference_masks[i],
                                         adaptive=self.adaptive_weight)
                rows.append(fused)
                alphas[i] = alpha
            x = torch.stack(rows)
        if self.bda_enabled:
            ref = reference.data if reference is not None else anchor.data
            x = self.bda(x, ref)
        return x, alphas

    def forward_pair(self, anchor_images: Tensor, reference_images: Tensor | None,
                     reference_masks: Sequence[BinaryMask] | None,
                     ) -> PairForwardResult:
        f_a = self.detector.extract(anchor_images)
        f_r = self.detector.extract(reference_images) if reference_images is not None else None
        aligned, alphas = self.align(f_a, f_r, reference_masks)
        outputs = self.detector.heads(FeatureMap(aligned, f_a.stride))
        return PairForwardResult(outputs, f_a, f_r, alphas)

    def forward(self, images: Tensor) -> DetectorOutputs:
        """Single-frame path: the bare base detector."""
        return self.detector(images)


def build_model(config: PipelineConfig, seed: bool = True) -> PairDetector:
    """Construct the model; with ``seed`` the parameter draws are fixed by
    the config seed (the base detector is built first, so its init does
    not depend on the ablation switches)."""
    if seed:
        torch.manual_seed(config.seed)
    return PairDetector(config)


def image_to_tensor(frame: np.ndarray) -> Tensor:
    """uint8 [H, W, 3] -> float32 [3, H, W] in [0, 1]."""
    return torch.from_numpy(frame.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def boxes_to_detections(boxes) -> list[Detection]:
    return [Detection.from_xyxy(float(b.x1), float(b.y1), float(b.x2), float(b.y2),
                                score=1.0) for b in boxes]


def build_frame_pairs(sequences: Sequence[VideoSequence]) -> list[FramePair]:
    """All (previous frame, current frame) pairs across the sequences."""
    pairs = []
    for seq in sequences:
        tensors = [image_to_tensor(f) for f in seq.frames]
        dets = [boxes_to_detections(b) for b in seq.annotations]
        for t in range(1, len(seq.frames)):
            pairs.append(FramePair(anchor_image=tensors[t], reference_image=tensors[t - 1],
                                   anchor_boxes=dets[t], reference_boxes=dets[t - 1]))
    return pairs


# --- augmentation -----------------------------------------------------------

def _boxes_to_xyxy(boxes: Sequence[Detection]) -> list[list[float]]:
    return [list(b.as_xyxy()) for b in boxes]


def _xyxy_to_boxes(xyxy: Sequence[Sequence[float]]) -> list[Detection]:
    return [Detection.from_xyxy(*b, score=1.0) for b in xyxy]


def _clip_boxes(boxes: list[list[float]], w: float, h: float) -> list[list[float]]:
    out = []
    for x1, y1, x2, y2 in boxes:
        x1, x2 = max(x1, 0.0), min(x2, w)
        y1, y2 = max(y1, 0.0), min(y2, h)
        if x2 > x1 and y2 > y1:
            out.append([x1, y1, x2, y2])
    return out


def flip_box_horizontal(box: Sequence[float], width: float) -> list[float]:
    x1, y1, x2, y2 = box
    return [width - x2, y1, width - x1, y2]


def flip_box_vertical(box: Sequence[float], height: float) -> list[float]:
    x1, y1, x2, y2 = box
    return [x1, height - y2, x2, height - y1]


def rotate_box_90(box: Sequence[float], width: float) -> list[float]:
    """One counterclockwise quarter turn: (x, y) -> (y, width - x)."""
    x1, y1, x2, y2 = box
    return [y1, width - x2, y2, width - x1]


def _resize(image: Tensor, size: tuple[int, int]) -> Tensor:
    return F.interpolate(image.unsqueeze(0), size=size, mode="bilinear",
                         align_corners=False).squeeze(0)


def augment(pair: FramePair, rng: np.random.Generator, input_size: tuple[int, int],
            aug) -> FramePair:
    """Jointly transform both frames and both box sets.

    One crop window, one resize to the configured input size, one rotation
    (multiples of 90 degrees), and one flip draw apply to the whole pair,
    preserving temporal consistency. Boxes are re-clipped; zero-area boxes
    are dropped. With augmentation disabled this is a deterministic resize.
    """
    imgs = [pair.anchor_image, pair.reference_image]
    box_sets = [_boxes_to_xyxy(pair.anchor_boxes), _boxes_to_xyxy(pair.reference_boxes)]
    h, w = imgs[0].shape[-2:]

    if aug.enabled and aug.crop:
        scale = float(rng.uniform(aug.min_crop_scale, 1.0))
        ch = max(16, int(round(h * scale)))
        cw = max(16, int(round(w * scale)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        imgs = [img[:, top: top + ch, left: left + cw] for img in imgs]
        box_sets = [
            _clip_boxes([[x1 - left, y1 - top, x2 - left, y2 - top]
                         for x1, y1, x2, y2 in boxes], cw, ch)
            for boxes in box_sets
        ]
        h, w = ch, cw

    out_h, out_w = input_size
    sx, sy = out_w / w, out_h / h
    imgs = [_resize(img, (out_h, out_w)) for img in imgs]
    box_sets = [[[x1 * sx, y1 * sy, x2 * sx, y2 * sy] for x1, y1, x2, y2 in boxes]
                for boxes in box_sets]
    h, w = out_h, out_w

    if aug.enabled and aug.rotate and rng.random() < 0.5:
        k = int(rng.integers(1, 4)) if h == w else 2
        for _ in range(k):
            imgs = [torch.rot90(img, 1, dims=(1, 2)) for img in imgs]
            box_sets = [[rotate_box_90(b, w) for b in boxes] for boxes in box_sets]
            h, w = w, h

    if aug.enabled and aug.flip:
        if rng.random() < 0.5:
            imgs = [torch.flip(img, dims=(2,)) for img in imgs]
            box_sets = [[flip_box_horizontal(b, w) for b in boxes] for boxes in box_sets]
        if rng.random() < 0.5:
            imgs = [torch.flip(img, dims=(1,)) for img in imgs]
            box_sets = [[flip_box_vertical(b, h) for b in boxes] for boxes in box_sets]

    return FramePair(anchor_image=imgs[0].contiguous(), reference_image=imgs[1].contiguous(),
                     anchor_boxes=_xyxy_to_boxes(box_sets[0]),
                     reference_boxes=_xyxy_to_boxes(box_sets[1]))


# --- training ---------------------------------------------------------------

def train_step(batch: Sequence[FramePair], model: PairDetector,
               optimizer: torch.optim.Optimizer, config: PipelineConfig,
               rng: np.random.Generator) -> dict[str, float]:
    """One optimizer update on a batch of frame pairs.

    Foreground alignment uses reference ground-truth masks; the contrastive
    term reads the pre-alignment intermediate features of both frames. The
    returned record holds the raw detection and contrastive losses plus
    total = detection + weight * contrastive.
    """
    model.train()
    stride = 4
    anchors = torch.stack([p.anchor_image for p in batch])
    grid_h, grid_w = anchors.shape[-2] // stride, anchors.shape[-1] // stride

    use_contrastive = config.contrastive.enabled and config.contrastive.weight > 0
    need_reference = model.uses_reference or use_contrastive
    references = torch.stack([p.reference_image for p in batch]) if need_reference else None

    ref_masks = None
    if model.fta_enabled:
        ref_masks = [ground_truth_mask(p.reference_boxes, grid_h, grid_w, stride)
                     for p in batch]

    result = model.forward_pair(anchors, references, ref_masks)
    targets = render_targets([p.anchor_boxes for p in batch], grid_h, grid_w, stride)
    det = detection_loss(result.outputs, targets,
                         size_weight=config.loss.size_weight,
                         offset_weight=config.loss.offset_weight)

    if use_contrastive and result.reference_feature is not None:
        m_a = torch.stack([ground_truth_mask(p.anchor_boxes, grid_h, grid_w, stride).data
                           for p in batch])
        m_r = torch.stack([ground_truth_mask(p.reference_boxes, grid_h, grid_w, stride).data
                           for p in batch])
        stacked, masks = concat_cross_frame(result.anchor_feature.data,
                                            result.reference_feature.data, m_a, m_r)
        bank = extract_pattern_bank(stacked, masks)
        tuples = sample_pairs(bank, rng)
        contrast = contrastive_loss(tuples, config.contrastive.temperature)
    else:
        contrast = torch.zeros(())

    total = det["total"] + config.contrastive.weight * contrast
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {"detection": float(det["total"].detach()),
            "contrastive": float(contrast.detach()),
            "total": float(total.detach())}


def make_optimizer(model: nn.Module, config: PipelineConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.train.learning_rate,
                            weight_decay=config.train.weight_decay)


def make_scheduler(optimizer: torch.optim.Optimizer, config: PipelineConfig):
    return torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=config.train.epochs, eta_min=config.train.min_learning_rate)


def train(sequences: Sequence[VideoSequence], config: PipelineConfig,
          out_dir: Path | str, log: Callable[[str], None] | None = None,
          ) -> tuple[PairDetector, Path, Path]:
    """Full training run: loss trace CSV plus a final checkpoint.

    Deterministic for a fixed config: the same seed drives parameter init,
    epoch shuffling, augmentation, and contrastive sampling.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(config)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    scheduler = make_scheduler(optimizer, config)

    pairs = build_frame_pairs(sequences)
    if not pairs:
        raise ValueError("training needs at least one frame pair")

    csv_path = out_dir / "loss_trace.csv"
    step = 0
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "detection", "contrastive", "total"])
        for epoch in range(1, config.train.epochs + 1):
            order = rng.permutation(len(pairs))
            epoch_total = 0.0
            n_batches = 0
            for start in range(0, len(order), config.train.batch_size):
                chunk = order[start: start + config.train.batch_size]
                batch = [augment(pairs[i], rng, config.data.input_size,
                                 config.data.augment) for i in chunk]
                losses = train_step(batch, model, optimizer, config, rng)
                step += 1
                writer.writerow([epoch, step, repr(losses["detection"]),
                                 repr(losses["contrastive"]), repr(losses["total"])])
                epoch_total += losses["total"]
                n_batches += 1
            scheduler.step()
            if log is not None:
                log(f"epoch {epoch}/{config.train.epochs} "
                    f"mean total loss {epoch_total / max(n_batches, 1):.4f}")

    ckpt_path = out_dir / "checkpoint.pt"
    checkpoint_save(model, config, ckpt_path, epoch=config.train.epochs)
    return model, csv_path, ckpt_path


# --- inference ---------------------------------------------------------------

@dataclass
class StepInfo:
    """Diagnostics for one inference step."""

    fta_applied: bool
    alpha: float | None


class VideoInference:
    """Stateful sequential inference over one video.

    Each frame passes the backbone exactly once; its fused features and
    validated detections (score strictly above the confidence threshold)
    become the next frame's reference. Frame 0 has no reference: alignment
    is skipped and the dynamic field sees the frame itself.
    """

    def __init__(self, model: PairDetector, config: PipelineConfig):
        self.model = model
        self.config = config
        self.prev_feature: FeatureMap | None = None
        self.prev_validated: list[Detection] = []
        model.eval()

    def step(self, image: Tensor) -> tuple[list[Detection], StepInfo]:
        with torch.no_grad():
            feature = self.model.detector.extract(image.unsqueeze(0))
            grid_h, grid_w = feature.data.shape[-2:]

            mask: BinaryMask | None = None
            if self.model.fta_enabled and self.prev_feature is not None:
                mask = fta_gate(self.prev_validated, grid_h, grid_w, feature.stride,
                                threshold=self.config.fta.confidence_threshold)
            applied = mask is not None and mask.source is not MaskSource.ABSENT

            aligned, alphas = self.model.align(
                feature,
                self.prev_feature if self.prev_feature is not None else None,
                [mask] if mask is not None else None,
            )
            outputs = self.model.detector.heads(FeatureMap(aligned, feature.stride))
            dets = decode_detections(outputs, feature.stride,
                                     max_k=self.config.infer.max_detections,
                                     threshold=self.config.infer.score_threshold)[0]

            self.prev_feature = feature
            self.prev_validated = [d for d in dets
                                   if d.score > self.config.fta.confidence_threshold]
            alpha = alphas[0]
            return dets, StepInfo(fta_applied=applied,
                                  alpha=float(alpha) if alpha is not None else None)


def infer_video(frames: Sequence[Tensor], model: PairDetector,
                config: PipelineConfig) -> list[list[Detection]]:
    """Per-frame detections over a temporally ordered frame list."""
    runner = VideoInference(model, config)
    return [runner.step(frame)[0] for frame in frames]


def infer_sequence(seq: VideoSequence, model: PairDetector,
                   config: PipelineConfig) -> list[list[Detection]]:
    return infer_video([image_to_tensor(f) for f in seq.frames], model, config)


# --- checkpointing -----------------------------------------------------------

CHECKPOINT_FORMAT = "pairdet-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_save(model: PairDetector, config: PipelineConfig, path: Path | str,
                    epoch: int | None = None) -> Path:
    """Single-file checkpoint embedding the config snapshot (and its seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(config),
        "state_dict": model.state_dict(),
        "epoch": epoch,
    }, path)
    return path


def checkpoint_load(path: Path | str, expected_config: PipelineConfig | None = None,
                    ) -> tuple[PairDetector, PipelineConfig]:
    """Restore a model bit-exactly from a checkpoint.

    If ``expected_config`` is given, its model section must match the
    embedded snapshot, otherwise an ArchitectureMismatchError is raised.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    try:
        config = config_from_dict(payload["config"])
        state = payload["state_dict"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing field {exc}") from exc

    if expected_config is not None and config_to_dict(expected_config)["model"] != \
            config_to_dict(config)["model"]:
        raise ArchitectureMismatchError(
            f"checkpoint model config {config_to_dict(config)['model']} does not match "
            f"requested {config_to_dict(expected_config)['model']}")

    model = build_model(config, seed=False)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ArchitectureMismatchError(
            f"checkpoint state does not fit the model: {exc}") from exc
    return model, config
