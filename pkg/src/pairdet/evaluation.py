"""Detection matching, precision/recall/F1, FPS timing, and box overlays."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .dataset import box_iou
from .detection_core import Detection

CRITERIA = ("center_in_box", "iou")

GT_COLOR = (255, 255, 0)    # yellow
TP_COLOR = (0, 255, 0)      # green
FP_COLOR = (255, 0, 0)      # red


@dataclass
class MatchResult:
    """One frame's matching outcome.

    ``matched_gt`` holds, per prediction in input order, the matched
    ground-truth index or -1.
    """

    tp: int
    fp: int
    fn: int
    matched_gt: list[int]


def match_detections(preds: Sequence[Detection], gts: Sequence[Sequence[float]],
                     criterion: str = "center_in_box",
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching, predictions in descending score order.

    center_in_box: a prediction matches an unmatched GT whose half-open
    region contains the prediction's center (candidates resolved in
    row-major (y1, x1) order). iou: the unmatched GT with the highest
    IoU >= iou_threshold. Unmatched predictions are FP, unmatched GT FN.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    gt_taken = [False] * len(gts)
    matched = [-1] * len(preds)

    for pi in order:
        pred = preds[pi]
        best = -1
        if criterion == "center_in_box":
            candidates = [
                gi for gi, g in enumerate(gts)
                if not gt_taken[gi] and g[0] <= pred.cx < g[2] and g[1] <= pred.cy < g[3]
            ]
            if candidates:
                best = min(candidates, key=lambda gi: (gts[gi][1], gts[gi][0], gi))
        else:
            best_iou = iou_threshold
            for gi, g in enumerate(gts):
                if gt_taken[gi]:
                    continue
                iou = box_iou(pred.as_xyxy(), g)
                if iou > best_iou or (iou == best_iou and iou > 0 and best == -1):
                    best_iou = iou
                    best = gi
        if best >= 0:
            gt_taken[best] = True
            matched[pi] = best

    tp = sum(1 for m in matched if m >= 0)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp, matched_gt=matched)


def precision_recall_f1(results: Iterable[MatchResult]) -> dict[str, float]:
    """Aggregate P/R/F1 over a split.

    A 0/0 denominator makes that metric 1 when TP = FP = FN = 0 (vacuously
    perfect) and 0 otherwise.
    """
    tp = fp = fn = 0
    for r in results:
        tp += r.tp
        fp += r.fp
        fn += r.fn
    empty = tp == 0 and fp == 0 and fn == 0

    def ratio(num: int, denom: int) -> float:
        if denom == 0:
            return 1.0 if empty else 0.0
        return num / denom

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    if precision + recall == 0:
        f1 = 1.0 if empty else 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1,
            "tp": tp, "fp": fp, "fn": fn}


def fps_benchmark(model, frames: Sequence, config, warmup: int = 4,
                  repeats: int = 3) -> dict[str, float]:
    """Wall-clock frames/second of sequential video inference.

    Frames must already be in memory (no disk I/O is timed); the first
    ``warmup`` frames of each repeat are excluded. Reports mean and
    standard deviation over >= 3 repeats.
    """
    from .pipeline import VideoInference  # local import to avoid a cycle

    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    if len(frames) <= warmup:
        raise ValueError(
            f"sequence of {len(frames)} frames is too short for warmup {warmup}")

    rates = []
    for _ in range(repeats):
        runner = VideoInference(model, config)
        for frame in frames[:warmup]:
            runner.step(frame)
        start = time.perf_counter()
        for frame in frames[warmup:]:
            runner.step(frame)
        elapsed = time.perf_counter() - start
        rates.append((len(frames) - warmup) / max(elapsed, 1e-9))
    return {
        "fps_mean": statistics.fmean(rates),
        "fps_std": statistics.stdev(rates),
        "repeats": float(repeats),
    }


def _draw_box(draw: ImageDraw.ImageDraw, xyxy: Sequence[float], color: tuple,
              label: str | None = None) -> None:
    x1, y1, x2, y2 = xyxy
    draw.rectangle([x1, y1, max(x2 - 1, x1), max(y2 - 1, y1)], outline=color, width=1)
    if label:
        ty = y1 - 10 if y1 >= 10 else y2
        draw.text((x1 + 1, ty), label, fill=color)


def visualize(frame: np.ndarray, gts: Sequence[Sequence[float]],
              preds: Sequence[Detection], match: MatchResult,
              path: Path | str) -> Path:
    """Overlay boxes on a frame: GT yellow, matched predictions green,
    unmatched red, scores printed beside predictions. Lossless PNG out."""
    img = Image.fromarray(frame).convert("RGB")
    draw = ImageDraw.Draw(img)
    for g in gts:
        _draw_box(draw, g, GT_COLOR)
    for pi, pred in enumerate(preds):
        color = TP_COLOR if match.matched_gt[pi] >= 0 else FP_COLOR
        _draw_box(draw, pred.as_xyxy(), color, label=f"{pred.score:.2f}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
