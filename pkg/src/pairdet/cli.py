"""Command-line entry point.

One executable with subcommands over a YAML config file:

    pairdet generate  --config cfg.yaml --out data/
    pairdet analyze   --data data/ --out analysis/
    pairdet train     --data data/ --out run/
    pairdet infer     --data data/ --checkpoint run/checkpoint.pt --out dets/
    pairdet eval      --data data/ --detections dets/ --out metrics/
    pairdet visualize --data data/ --detections dets/ --out overlays/

Every run directory receives the fully resolved config snapshot. Errors
exit with a category-specific code and a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as dataset_mod
from . import evaluation, pipeline
from .config import ConfigError, PipelineConfig, load_config, save_config
from .dataset import DatasetError
from .detection_core import Detection
from .pipeline import CheckpointError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4

EXIT_CODE_HELP = """exit codes:
  0  success
  1  unexpected failure
  2  config error (unknown key, bad type, unparsable file)
  3  data error (missing or malformed dataset files)
  4  checkpoint error (unreadable file or architecture mismatch)
"""


def _error(category: str, message: str) -> None:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)


def _load(args) -> PipelineConfig:
    config, _ = load_config(args.config, args.set, seed=args.seed)
    return config


def _write_snapshot(config: PipelineConfig, out_dir: Path) -> None:
    save_config(config, out_dir / "resolved_config.yaml")


def cmd_generate(args) -> int:
    config = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(config, out)
    seeds = np.random.SeedSequence(config.seed).generate_state(
        config.synthesis.num_sequences)
    for i, seq_seed in enumerate(seeds):
        params = dataclasses.replace(config.synthesis, seed=int(seq_seed))
        seq = dataset_mod.generate_sequence(params, sequence_id=f"seq_{i:03d}")
        dataset_mod.save_sequence(seq, out)
        print(f"wrote {out / seq.sequence_id} ({len(seq.frames)} frames)")
    return EXIT_OK


def _load_sequences(root: str) -> list[dataset_mod.VideoSequence]:
    ids = dataset_mod.discover_sequences(root)
    return [dataset_mod.load_sequence(root, sid) for sid in ids]


def cmd_analyze(args) -> int:
    config = _load(args)
    sequences = _load_sequences(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(config, out)

    all_scores: list[float] = []
    with open(out / "motion_iou.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "track", "frame", "motion_iou"])
        for seq in sequences:
            scores = dataset_mod.motion_iou(seq)
            for (track, frame), value in sorted(scores.items()):
                writer.writerow([seq.sequence_id, track, frame, f"{value:.6f}"])
                all_scores.append(value)

    hist = dataset_mod.speed_histogram(all_scores)
    with open(out / "speed_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "proportion"])
        for name in ("slow", "medium", "fast"):
            writer.writerow([name, f"{hist[name]:.6f}"])

    _plot_histogram(all_scores, hist, out / "motion_histogram.png")
    print(f"analyzed {len(sequences)} sequences, {len(all_scores)} scores -> {out}")
    return EXIT_OK


def _plot_histogram(scores: list[float], hist: dict[str, float], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(scores, bins=20, range=(0.0, 1.0), color="#4878cf", edgecolor="black")
    ax.set_xlabel("motion IoU (lower = faster)")
    ax.set_ylabel("count")
    ax.set_title("slow {:.0%} / medium {:.0%} / fast {:.0%}".format(
        hist["slow"], hist["medium"], hist["fast"]))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_train(args) -> int:
    config = _load(args)
    sequences = _load_sequences(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(config, out)
    _, csv_path, ckpt_path = pipeline.train(sequences, config, out, log=print)
    print(f"loss trace: {csv_path}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    config, provided = load_config(args.config, args.set, seed=args.seed)
    expected = config if "model" in provided else None
    model, ckpt_config = pipeline.checkpoint_load(args.checkpoint, expected_config=expected)
    # runtime keys (thresholds, output caps) come from the invocation config
    ckpt_config.infer = config.infer
    ckpt_config.fta.confidence_threshold = config.fta.confidence_threshold

    sequences = _load_sequences(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(config, out)
    for seq in sequences:
        dets = pipeline.infer_sequence(seq, model, ckpt_config)
        with open(out / f"{seq.sequence_id}.jsonl", "w") as fh:
            for frame_idx, frame_dets in enumerate(dets):
                record = {"frame": frame_idx, "boxes": [
                    {"x1": d.as_xyxy()[0], "y1": d.as_xyxy()[1],
                     "x2": d.as_xyxy()[2], "y2": d.as_xyxy()[3],
                     "score": d.score} for d in frame_dets]}
                fh.write(json.dumps(record) + "\n")
        print(f"wrote {out / (seq.sequence_id + '.jsonl')}")
    return EXIT_OK


def _load_detections(path: Path, num_frames: int) -> list[list[Detection]]:
    if not path.is_file():
        raise DatasetError(f"missing detections file: {path}")
    per_frame: list[list[Detection]] = [[] for _ in range(num_frames)]
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                idx = int(record["frame"])
                boxes = [Detection.from_xyxy(float(b["x1"]), float(b["y1"]),
                                             float(b["x2"]), float(b["y2"]),
                                             score=float(b["score"]))
                         for b in record["boxes"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if not 0 <= idx < num_frames:
                raise DatasetError(f"{path}:{lineno}: frame index {idx} out of range")
            per_frame[idx] = boxes
    return per_frame


def _evaluate(args, config: PipelineConfig):
    sequences = _load_sequences(args.data)
    det_root = Path(args.detections)
    threshold = config.infer.score_threshold
    matches = []
    per_sequence = {}
    for seq in sequences:
        preds = _load_detections(det_root / f"{seq.sequence_id}.jsonl", len(seq.frames))
        seq_matches = []
        for frame_idx, boxes in enumerate(seq.annotations):
            frame_preds = [d for d in preds[frame_idx] if d.score >= threshold]
            gts = [b.as_xyxy() for b in boxes]
            seq_matches.append(evaluation.match_detections(
                frame_preds, gts, criterion=config.eval.criterion,
                iou_threshold=config.eval.iou_threshold))
        per_sequence[seq.sequence_id] = seq_matches
        matches.extend(seq_matches)
    return sequences, per_sequence, matches


def cmd_eval(args) -> int:
    config = _load(args)
    sequences, _, matches = _evaluate(args, config)
    metrics = evaluation.precision_recall_f1(matches)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(config, out)
    split = Path(args.data).name or "split"
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "criterion", "threshold", "TP", "FP", "FN",
                         "precision", "recall", "f1"])
        writer.writerow([split, config.eval.criterion,
                         f"{config.infer.score_threshold:g}",
                         metrics["tp"], metrics["fp"], metrics["fn"],
                         f"{metrics['precision']:.6f}", f"{metrics['recall']:.6f}",
                         f"{metrics['f1']:.6f}"])
    print(f"P={metrics['precision']:.4f} R={metrics['recall']:.4f} "
          f"F1={metrics['f1']:.4f} over {len(sequences)} sequences")
    return EXIT_OK


def cmd_visualize(args) -> int:
    config = _load(args)
    sequences, per_sequence, _ = _evaluate(args, config)
    det_root = Path(args.detections)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(config, out)
    threshold = config.infer.score_threshold
    count = 0
    for seq in sequences:
        preds = _load_detections(det_root / f"{seq.sequence_id}.jsonl", len(seq.frames))
        for frame_idx, frame in enumerate(seq.frames):
            frame_preds = [d for d in preds[frame_idx] if d.score >= threshold]
            gts = [b.as_xyxy() for b in seq.annotations[frame_idx]]
            match = per_sequence[seq.sequence_id][frame_idx]
            evaluation.visualize(frame, gts, frame_preds, match,
                                 out / seq.sequence_id / f"{frame_idx:06d}.png")
            count += 1
    print(f"wrote {count} overlay images under {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairdet",
        description=__doc__,
        epilog=EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = False, checkpoint: bool = False,
               detections: bool = False) -> None:
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="alias for the config seed key")
        if data:
            p.add_argument("--data", required=True, help="dataset root directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if detections:
            p.add_argument("--detections", required=True,
                           help="directory of per-sequence detection JSONL files")

    common(sub.add_parser("generate", help="render synthetic jittery-video sequences"))
    common(sub.add_parser("analyze", help="motion-speed analysis of a dataset"), data=True)
    common(sub.add_parser("train", help="train on a dataset of sequences"), data=True)
    common(sub.add_parser("infer", help="run sequential video inference"),
           data=True, checkpoint=True)
    common(sub.add_parser("eval", help="score detections against ground truth"),
           data=True, detections=True)
    common(sub.add_parser("visualize", help="write box-overlay images"),
           data=True, detections=True)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "analyze": cmd_analyze,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _error("config", str(exc))
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        _error("data", str(exc))
        return EXIT_DATA
    except CheckpointError as exc:
        _error("checkpoint", str(exc))
        return EXIT_CHECKPOINT
    except Exception as exc:  # pragma: no cover - last-resort guard
        _error("failure", f"{type(exc).__name__}: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
