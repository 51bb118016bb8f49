"""Synthetic jittery-video generation, sequence I/O, and motion analysis.

Sequences are short clips of elliptical targets moving over a textured,
camera-jittered background, with optional specular blobs, motion blur, and
occluding bars. Boxes are axis-aligned, origin top-left, half-open
[x1, x2) x [y1, y2) in pixel coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

SLOW_EDGE = 0.9
FAST_EDGE = 0.7
MOTION_WINDOW = 10


class ParameterError(ValueError):
    """Synthesis parameters that cannot produce a valid sequence."""


class DatasetError(ValueError):
    """On-disk sequence layout problems (missing or inconsistent files)."""


class AnnotationFormatError(DatasetError):
    """A malformed annotation line; the message names file and line."""


@dataclass
class SynthesisParams:
    num_sequences: int = 8  # used by batch generation; one sequence ignores it
    image_size: tuple[int, int] = (64, 64)  # (H, W)
    num_frames: int = 30
    num_targets: int = 1
    target_size_range: tuple[float, float] = (10.0, 16.0)  # box diameter, px
    contrast: float = 0.5         # 0..1; low values give concealed targets
    velocity_range: tuple[float, float] = (0.0, 2.0)  # speed, px/frame
    velocities: tuple[tuple[float, float], ...] | None = None  # exact (vx, vy) per target
    visible_range: tuple[float, float] = (1.0, 1.0)  # per-target visible clip fraction
    jitter_amplitude: float = 1.0  # camera shake, px
    specular: bool = False
    motion_blur: bool = False
    occluders: bool = False
    seed: int = 0


@dataclass
class TrackedBox:
    track: int
    x1: int
    y1: int
    x2: int
    y2: int

    def as_xyxy(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class VideoSequence:
    sequence_id: str
    frames: list[np.ndarray]  # uint8 [H, W, 3], indices contiguous from 0
    annotations: list[list[TrackedBox]] = field(default_factory=list)


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth low-frequency texture in [0.25, 0.65], float [H, W, 3]."""
    coarse = rng.uniform(0.0, 1.0, size=(max(h // 8, 2), max(w // 8, 2), 3))
    zoomed = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=3)
    zoomed = zoomed[:h, :w]
    lo, hi = zoomed.min(), zoomed.max()
    if hi > lo:
        zoomed = (zoomed - lo) / (hi - lo)
    return 0.25 + 0.4 * zoomed


def _draw_ellipse(frame: np.ndarray, cx: float, cy: float, ax_x: float, ax_y: float,
                  color: np.ndarray) -> None:
    h, w = frame.shape[:2]
    ys = np.arange(h).reshape(-1, 1)
    xs = np.arange(w).reshape(1, -1)
    rr = ((xs - cx) / ax_x) ** 2 + ((ys - cy) / ax_y) ** 2
    inside = rr <= 1.0
    # slight radial shading keeps the target from being a flat disk
    shade = (1.0 - 0.25 * rr[inside])[:, None]
    frame[inside] = frame[inside] * 0.15 + color * shade * 0.85


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


def generate_sequence(params: SynthesisParams, sequence_id: str = "seq") -> VideoSequence:
    """Render a synthetic clip with exact per-frame ground-truth boxes.

    The background texture undergoes global camera jitter; each elliptical
    target moves at its own velocity with boundary reflection and is drawn
    (and annotated) only inside its visibility window, so clips can contain
    target-free frames the way clinical video does. Fixed seeds give
    bit-identical pixels.
    """
    h, w = params.image_size
    rng = np.random.default_rng(params.seed)

    lo_d, hi_d = params.target_size_range
    if hi_d + 2 >= min(h, w):
        raise ParameterError(
            f"target diameter up to {hi_d} does not fit a {h}x{w} image")
    if params.velocity_range[0] < 0 or params.velocity_range[1] < params.velocity_range[0]:
        raise ParameterError(f"bad velocity range {params.velocity_range}")
    if params.num_frames < 1 or params.num_targets < 1:
        raise ParameterError("need at least one frame and one target")

    margin = int(math.ceil(abs(params.jitter_amplitude))) + 2
    canvas = _textured_background(rng, h + 2 * margin, w + 2 * margin)

    targets = []
    for t in range(params.num_targets):
        ax_x = rng.uniform(lo_d, hi_d) / 2.0
        ax_y = rng.uniform(lo_d, hi_d) / 2.0
        cx = rng.uniform(ax_x + 1, w - ax_x - 1)
        cy = rng.uniform(ax_y + 1, h - ax_y - 1)
        if params.velocities is not None:
            vx, vy = params.velocities[t % len(params.velocities)]
        else:
            speed = rng.uniform(*params.velocity_range)
            angle = rng.uniform(0, 2 * math.pi)
            vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        tint = rng.uniform(-0.05, 0.05, size=3)
        lo_v, hi_v = params.visible_range
        if not 0.0 < lo_v <= hi_v <= 1.0:
            raise ParameterError(f"bad visible range {params.visible_range}")
        span = max(1, int(round(rng.uniform(lo_v, hi_v) * params.num_frames)))
        first = int(rng.integers(0, params.num_frames - span + 1))
        targets.append({"cx": cx, "cy": cy, "vx": vx, "vy": vy,
                        "ax_x": ax_x, "ax_y": ax_y, "tint": tint,
                        "visible": range(first, first + span)})

    frames: list[np.ndarray] = []
    annotations: list[list[TrackedBox]] = []
    base_color = np.array([0.55, 0.35, 0.3])

    for frame_idx in range(params.num_frames):
        if params.jitter_amplitude > 0:
            jy = int(round(rng.uniform(-params.jitter_amplitude, params.jitter_amplitude)))
            jx = int(round(rng.uniform(-params.jitter_amplitude, params.jitter_amplitude)))
        else:
            jy = jx = 0
        frame = canvas[margin + jy: margin + jy + h, margin + jx: margin + jx + w].copy()

        boxes: list[TrackedBox] = []
        for tid, tgt in enumerate(targets):
            if frame_idx in tgt["visible"]:
                local_bg = frame[int(tgt["cy"]), int(tgt["cx"])]
                color = np.clip(
                    local_bg + params.contrast * (base_color + tgt["tint"]), 0.0, 0.98)
                _draw_ellipse(frame, tgt["cx"], tgt["cy"], tgt["ax_x"], tgt["ax_y"], color)
                x1 = int(math.floor(tgt["cx"] - tgt["ax_x"]))
                y1 = int(math.floor(tgt["cy"] - tgt["ax_y"]))
                x2 = int(math.ceil(tgt["cx"] + tgt["ax_x"]))
                y2 = int(math.ceil(tgt["cy"] + tgt["ax_y"]))
                boxes.append(TrackedBox(track=tid, x1=max(x1, 0), y1=max(y1, 0),
                                        x2=min(x2, w), y2=min(y2, h)))
            tgt["cx"] += tgt["vx"]
            tgt["cy"] += tgt["vy"]
            tgt["cx"], tgt["vx"] = _reflect(tgt["cx"], tgt["vx"], tgt["ax_x"] + 1, w - tgt["ax_x"] - 1)
            tgt["cy"], tgt["vy"] = _reflect(tgt["cy"], tgt["vy"], tgt["ax_y"] + 1, h - tgt["ax_y"] - 1)

        if params.specular:
            for _ in range(int(rng.integers(1, 4))):
                sx = rng.uniform(0, w)
                sy = rng.uniform(0, h)
                radius = rng.uniform(1.0, 3.0)
                ys = np.arange(h).reshape(-1, 1)
                xs = np.arange(w).reshape(1, -1)
                spot = np.exp(-((xs - sx) ** 2 + (ys - sy) ** 2) / (2 * radius ** 2))
                frame = np.clip(frame + 0.9 * spot[..., None], 0.0, 1.0)

        if params.occluders and rng.random() < 0.3:
            thickness = int(rng.integers(2, 6))
            if rng.random() < 0.5:
                pos = int(rng.integers(0, max(w - thickness, 1)))
                frame[:, pos: pos + thickness] = 0.12
            else:
                pos = int(rng.integers(0, max(h - thickness, 1)))
                frame[pos: pos + thickness, :] = 0.12

        if params.motion_blur:
            speeds = [math.hypot(t["vx"], t["vy"]) for t in targets]
            length = int(np.clip(round(max(speeds)), 1, 5))
            if length > 1:
                axis = 1 if abs(targets[0]["vx"]) >= abs(targets[0]["vy"]) else 0
                frame = ndimage.uniform_filter1d(frame, size=length, axis=axis, mode="nearest")

        frames.append((np.clip(frame, 0.0, 1.0) * 255).round().astype(np.uint8))
        annotations.append(boxes)

    return VideoSequence(sequence_id=sequence_id, frames=frames, annotations=annotations)


def save_sequence(seq: VideoSequence, root: Path | str) -> Path:
    """Write ``<root>/<id>/frames/%06d.png`` plus ``annotations.jsonl``."""
    root = Path(root)
    seq_dir = root / seq.sequence_id
    frames_dir = seq_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        Image.fromarray(frame).save(frames_dir / f"{i:06d}.png")
    with open(seq_dir / "annotations.jsonl", "w") as fh:
        for i, boxes in enumerate(seq.annotations):
            record = {"frame": i, "boxes": [
                {"track": b.track, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2}
                for b in boxes]}
            fh.write(json.dumps(record) + "\n")
    return seq_dir


def load_sequence(root: Path | str, sequence_id: str) -> VideoSequence:
    """Read a sequence back, validating layout, frame files, and boxes."""
    seq_dir = Path(root) / sequence_id
    ann_path = seq_dir / "annotations.jsonl"
    if not ann_path.is_file():
        raise DatasetError(f"missing annotations file: {ann_path}")

    annotations: list[list[TrackedBox]] = []
    with open(ann_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                frame_idx = record["frame"]
                raw_boxes = record["boxes"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise AnnotationFormatError(f"{ann_path}:{lineno}: {exc}") from exc
            if frame_idx != len(annotations):
                raise AnnotationFormatError(
                    f"{ann_path}:{lineno}: frame indices must be contiguous from 0, "
                    f"got {frame_idx}")
            boxes = []
            for raw in raw_boxes:
                try:
                    box = TrackedBox(track=int(raw["track"]), x1=int(raw["x1"]),
                                     y1=int(raw["y1"]), x2=int(raw["x2"]), y2=int(raw["y2"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise AnnotationFormatError(f"{ann_path}:{lineno}: {exc}") from exc
                if box.x2 <= box.x1 or box.y2 <= box.y1:
                    raise AnnotationFormatError(
                        f"{ann_path}:{lineno}: box has non-positive area: {raw}")
                boxes.append(box)
            annotations.append(boxes)

    frames = []
    for i in range(len(annotations)):
        frame_path = seq_dir / "frames" / f"{i:06d}.png"
        if not frame_path.is_file():
            raise DatasetError(f"annotated frame missing on disk: {frame_path}")
        frames.append(np.asarray(Image.open(frame_path).convert("RGB")))

    h, w = frames[0].shape[:2] if frames else (0, 0)
    for i, boxes in enumerate(annotations):
        for box in boxes:
            if not (0 <= box.x1 < box.x2 <= w and 0 <= box.y1 < box.y2 <= h):
                raise DatasetError(
                    f"{ann_path}: frame {i} box outside {h}x{w} image: {box}")
    return VideoSequence(sequence_id=sequence_id, frames=frames, annotations=annotations)


def discover_sequences(root: Path | str) -> list[str]:
    """Sequence ids under a dataset root, sorted for determinism."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")
    ids = sorted(p.name for p in root.iterdir() if (p / "annotations.jsonl").is_file())
    if not ids:
        raise DatasetError(f"no sequences found under {root}")
    return ids


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two half-open xyxy boxes; degenerate boxes score 0."""
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def motion_iou(seq: VideoSequence, window: int = MOTION_WINDOW,
               ) -> dict[tuple[int, int], float]:
    """Per (track, frame) mean IoU of a track's box against its own box in
    the surrounding +-window frames; lower means faster apparent motion.

    Only offsets where the track exists are averaged; tracks present in
    fewer than 2 frames yield no score.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    per_track: dict[int, dict[int, tuple[int, int, int, int]]] = {}
    for t, boxes in enumerate(seq.annotations):
        for box in boxes:
            per_track.setdefault(box.track, {})[t] = box.as_xyxy()

    scores: dict[tuple[int, int], float] = {}
    for track, by_frame in per_track.items():
        for t, box in by_frame.items():
            vals = [box_iou(box, by_frame[t + d])
                    for d in range(-window, window + 1)
                    if d != 0 and (t + d) in by_frame]
            if vals:
                scores[(track, t)] = float(np.mean(vals))
    return scores


def speed_histogram(scores: Iterable[float], slow_edge: float = SLOW_EDGE,
                    fast_edge: float = FAST_EDGE) -> dict[str, float]:
    """Proportions of slow (> slow_edge), medium, and fast (<= fast_edge)
    motion scores; all zeros for empty input."""
    values = list(scores)
    if not values:
        return {"slow": 0.0, "medium": 0.0, "fast": 0.0}
    n = len(values)
    slow = sum(1 for v in values if v > slow_edge)
    fast = sum(1 for v in values if v <= fast_edge)
    return {"slow": slow / n, "medium": (n - slow - fast) / n, "fast": fast / n}
