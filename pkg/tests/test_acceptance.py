"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with:  pytest -v -s tests/test_acceptance.py

The training-based criteria (7, 8, 10) are deterministic for their fixed
seeds, so reported numbers reproduce exactly on the same hardware.
"""

import dataclasses
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pairdet.background_alignment import (OFFSET_CHANNELS, BackgroundAlignment,
                                          bilinear_sample, deformable_conv3x3)
from pairdet.config import load_config
from pairdet.contrastive import info_nce
from pairdet.dataset import (SynthesisParams, generate_sequence, motion_iou,
                             speed_histogram)
from pairdet.detection_core import (Detection, DetectorOutputs, decode_detections,
                                    detection_loss, render_targets)
from pairdet.evaluation import match_detections, precision_recall_f1
from pairdet.pipeline import (VideoInference, augment, build_frame_pairs,
                              build_model, checkpoint_load, checkpoint_save,
                              image_to_tensor, infer_sequence, infer_video,
                              make_optimizer, make_scheduler, train, train_step)
from pairdet.temporal_alignment import BinaryMask, MaskSource, apply_fta

from .oracles import (bilinear_bruteforce, check_gradients, masked_mean_bruteforce,
                      match_bruteforce, motion_iou_bruteforce)
from .test_pipeline import bare_train_trace, read_trace, tiny_config, tiny_sequences


@contextmanager
def criterion(num: int, name: str):
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"\n[criterion {num:02d}] {name}: FAIL ({time.time() - start:.1f}s)")
        raise
    else:
        print(f"\n[criterion {num:02d}] {name}: PASS ({time.time() - start:.1f}s)")


def _dataset(n, frames, seed0, size=48, **kw):
    params = dict(image_size=(size, size), num_frames=frames, num_targets=1,
                  target_size_range=(9.0, 13.0))
    params.update(kw)
    return [generate_sequence(SynthesisParams(seed=seed0 + i, **params), f"s{i}")
            for i in range(n)]


def _split_f1(model, config, sequences, threshold=0.3):
    matches = []
    for seq in sequences:
        dets = infer_sequence(seq, model, config)
        for t, boxes in enumerate(seq.annotations):
            preds = [d for d in dets[t] if d.score >= threshold]
            matches.append(match_detections(preds, [b.as_xyxy() for b in boxes],
                                            criterion="center_in_box"))
    return precision_recall_f1(matches)


def _train(config, sequences):
    model = build_model(config)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    scheduler = make_scheduler(optimizer, config)
    pairs = build_frame_pairs(sequences)
    for _ in range(config.train.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), config.train.batch_size):
            batch = [augment(pairs[i], rng, config.data.input_size,
                             config.data.augment)
                     for i in order[start: start + config.train.batch_size]]
            train_step(batch, model, optimizer, config, rng)
        scheduler.step()
    return model


def test_criterion_01_oracle_equivalence():
    with criterion(1, "oracle equivalence (pool / bilinear / motion IoU / matching)"):
        start = time.time()
        rng = np.random.default_rng(1001)

        from pairdet.temporal_alignment import masked_channel_pool
        for _ in range(20):
            c, h, w = rng.integers(1, 6), rng.integers(2, 8), rng.integers(2, 8)
            feature = rng.normal(size=(c, h, w))
            mask = (rng.random((h, w)) < 0.5).astype(np.float64)
            if mask.sum() == 0:
                mask[0, 0] = 1.0
            got = masked_channel_pool(torch.from_numpy(feature), torch.from_numpy(mask))
            np.testing.assert_allclose(got.numpy(),
                                       masked_mean_bruteforce(feature, mask), atol=1e-6)

        for _ in range(20):
            h, w = int(rng.integers(2, 8)), int(rng.integers(2, 8))
            plane = rng.normal(size=(h, w))
            y = float(rng.uniform(-2, h + 2))
            x = float(rng.uniform(-2, w + 2))
            got = bilinear_sample(torch.from_numpy(plane).view(1, 1, h, w), y, x)
            assert got == pytest.approx(bilinear_bruteforce(plane, y, x), abs=1e-6)

        from pairdet.dataset import TrackedBox, VideoSequence
        for _ in range(20):
            num_frames = int(rng.integers(3, 12))
            annotations = []
            for t in range(num_frames):
                boxes = []
                for tid in range(int(rng.integers(0, 3))):
                    x1, y1 = rng.integers(0, 30, size=2)
                    bw, bh = rng.integers(3, 12, size=2)
                    boxes.append(TrackedBox(track=tid, x1=int(x1), y1=int(y1),
                                            x2=int(x1 + bw), y2=int(y1 + bh)))
                annotations.append(boxes)
            frames = [np.zeros((48, 48, 3), dtype=np.uint8)] * num_frames
            seq = VideoSequence("o", frames, annotations)
            got = motion_iou(seq, window=5)
            raw = [[(b.track, *b.as_xyxy()) for b in bs] for bs in annotations]
            expected = motion_iou_bruteforce(raw, window=5)
            assert got.keys() == expected.keys()
            for key in got:
                assert got[key] == pytest.approx(expected[key], abs=1e-6)

        for _ in range(20):
            preds = [Detection(cx=float(rng.uniform(0, 40)), cy=float(rng.uniform(0, 40)),
                               w=float(rng.uniform(4, 12)), h=float(rng.uniform(4, 12)),
                               score=float(rng.uniform(0.1, 1.0)))
                     for _ in range(int(rng.integers(0, 6)))]
            gts = []
            for _ in range(int(rng.integers(0, 5))):
                x1, y1 = rng.uniform(0, 30, size=2)
                gts.append((float(x1), float(y1), float(x1 + rng.uniform(4, 12)),
                            float(y1 + rng.uniform(4, 12))))
            for mode in ("center_in_box", "iou"):
                got = match_detections(preds, gts, criterion=mode, iou_threshold=0.3)
                raw = [(p.cx, p.cy, p.w, p.h, p.score) for p in preds]
                assert (got.tp, got.fp, got.fn) == match_bruteforce(
                    raw, gts, mode, iou_threshold=0.3)

        assert time.time() - start < 60.0


def test_criterion_02_zero_offset_deformable_equivalence():
    with criterion(2, "deformable conv: zero-offset and integer-offset equivalence"):
        start = time.time()
        rng = np.random.default_rng(1002)
        for _ in range(20):
            c, o = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            h, w = int(rng.integers(4, 9)), int(rng.integers(4, 9))
            feature = torch.from_numpy(rng.normal(size=(1, c, h, w)))
            weight = torch.from_numpy(rng.normal(size=(o, c, 3, 3)))
            bias = torch.from_numpy(rng.normal(size=o))
            offsets = torch.zeros(1, OFFSET_CHANNELS, h, w, dtype=torch.float64)
            got = deformable_conv3x3(feature, offsets, weight, bias)
            ref = F.conv2d(feature, weight, bias, padding=1)
            assert (got - ref).abs().max() < 1e-5

        from .oracles import shifted_conv_bruteforce
        for seed in range(5):
            rng2 = np.random.default_rng(seed)
            feature = torch.from_numpy(rng2.normal(size=(1, 3, 7, 8)))
            weight = torch.from_numpy(rng2.normal(size=(4, 3, 3, 3)))
            bias = torch.from_numpy(rng2.normal(size=4))
            for (dy, dx) in ((0, 1), (1, 0), (-1, 1)):
                offsets = torch.zeros(1, OFFSET_CHANNELS, 7, 8, dtype=torch.float64)
                offsets[:, 0::2] = dy
                offsets[:, 1::2] = dx
                got = deformable_conv3x3(feature, offsets, weight, bias)[0].numpy()
                ref = shifted_conv_bruteforce(feature[0].numpy(), weight.numpy(),
                                              bias.numpy(), shift_y=dy, shift_x=dx)
                interior = (slice(None),
                            slice(1 + max(0, -dy), 6 - max(0, dy)),
                            slice(1 + max(0, -dx), 7 - max(0, dx)))
                np.testing.assert_allclose(got[interior], ref[interior], atol=1e-8)

        assert time.time() - start < 60.0


def test_criterion_03_gradient_suite():
    with criterion(3, "analytic vs finite-difference gradients (all modules)"):
        start = time.time()
        torch.manual_seed(1003)

        # foreground alignment, including the adaptive-weight path through
        # both pooled patterns
        for _ in range(3):
            anchor = torch.randn(3, 5, 5, dtype=torch.float64)
            reference = torch.randn(3, 5, 5, dtype=torch.float64)
            mask_data = torch.zeros(5, 5, dtype=torch.float64)
            mask_data[1:4, 1:4] = 1.0
            mask = BinaryMask(mask_data, MaskSource.GROUND_TRUTH)
            probe = torch.randn(3, 5, 5, dtype=torch.float64)

            def fta_loss():
                fused, _ = apply_fta(anchor, reference, mask)
                return (fused * probe).sum()

            check_gradients(fta_loss, [anchor, reference], eps=1e-4, tol=1e-3)

        # background alignment end-to-end at fractional offsets
        for _ in range(2):
            block = BackgroundAlignment(3).double()
            with torch.no_grad():
                block.field.project.weight.uniform_(-0.05, 0.05)
                block.field.project.bias.uniform_(0.2, 0.4)
            enhanced = torch.randn(1, 3, 5, 5, dtype=torch.float64)
            reference = torch.randn(1, 3, 5, 5, dtype=torch.float64)
            probe = torch.randn(1, 3, 5, 5, dtype=torch.float64)

            def bda_loss():
                return (block(enhanced, reference) * probe).sum()

            check_gradients(bda_loss, [enhanced, reference,
                                       block.field.project.weight,
                                       block.align.kernel.weight,
                                       block.align.kernel.bias],
                            eps=1e-4, tol=1e-3)

        # InfoNCE through the L2 normalization
        for _ in range(3):
            q = torch.rand(6, dtype=torch.float64) + 0.1
            p = torch.rand(6, dtype=torch.float64) + 0.1
            negs = [torch.rand(6, dtype=torch.float64) + 0.1 for _ in range(3)]

            def nce_loss():
                return info_nce(q, p, negs, temperature=0.3)

            check_gradients(nce_loss, [q, p] + negs, eps=1e-4, tol=1e-3)

        # detection loss w.r.t. all three head outputs
        for _ in range(3):
            targets = render_targets(
                [[Detection(cx=21, cy=17, w=9, h=7), Detection(cx=40, cy=44, w=12, h=10)]],
                16, 16, 4)
            targets = dataclasses.replace(
                targets, heatmap_target=targets.heatmap_target.double(),
                size_target=targets.size_target.double(),
                offset_target=targets.offset_target.double())
            heat = torch.rand(1, 1, 16, 16, dtype=torch.float64) * 0.9 + 0.05
            size = torch.randn(1, 2, 16, 16, dtype=torch.float64)
            offset = torch.rand(1, 2, 16, 16, dtype=torch.float64)

            def det_loss():
                return detection_loss(DetectorOutputs(heat, size, offset),
                                      targets)["total"]

            check_gradients(det_loss, [heat, size, offset], eps=1e-4, tol=1e-3)

        assert time.time() - start < 300.0


def test_criterion_04_closed_form_losses():
    with criterion(4, "closed-form loss values"):
        q = torch.tensor([1.0, 0.0])
        other = torch.tensor([0.0, 1.0])
        loss = info_nce(q, other, [other.clone()], temperature=0.07)
        assert abs(float(loss) - math.log(2.0)) < 1e-6

        for k in (1, 3, 7):
            loss = info_nce(q, q.clone(), [q.clone() for _ in range(k)],
                            temperature=0.07)
            assert abs(float(loss) - math.log(k + 1)) < 1e-6

        targets = render_targets([[Detection(cx=22, cy=18, w=10, h=8)]], 16, 16, 4)
        perfect = DetectorOutputs(
            center_heatmap=torch.where(targets.heatmap_target == 1.0,
                                       torch.ones_like(targets.heatmap_target),
                                       torch.zeros_like(targets.heatmap_target)),
            size_map=targets.size_target.clone(),
            offset_map=targets.offset_target.clone())
        losses = detection_loss(perfect, targets)
        assert float(losses["total"]) == 0.0


def test_criterion_05_gating_semantics():
    with criterion(5, "confidence gating at the 0.6 threshold"):
        torch.manual_seed(1005)
        frames = [torch.rand(3, 32, 32) for _ in range(2)]
        reference_box = dict(cx=16.0, cy=16.0, w=20.0, h=20.0)

        def run_frame1(fta_enabled: bool, injected_score: float):
            config = tiny_config(**({} if fta_enabled else {"fta.enabled": "false"}))
            torch.manual_seed(77)
            model = build_model(config)
            runner = VideoInference(model, config)
            runner.step(frames[0])
            runner.prev_validated = [Detection(score=injected_score, **reference_box)]
            return runner.step(frames[1])

        # reference best score 0.59: strictly-below-threshold, output must be
        # bit-identical to the FTA-disabled configuration
        dets_a, info_a = run_frame1(True, 0.59)
        dets_b, _ = run_frame1(False, 0.59)
        assert not info_a.fta_applied
        assert [dataclasses.astuple(d) for d in dets_a] == [
            dataclasses.astuple(d) for d in dets_b]

        # at 0.61 the gate opens; the adaptive weight obeys its bounds
        _, info_c = run_frame1(True, 0.61)
        assert info_c.fta_applied
        assert math.exp(-1) - 1e-9 <= info_c.alpha <= math.e + 1e-9


def test_criterion_06_ablation_nesting(tmp_path):
    with criterion(6, "all-switches-off reproduces the bare detector bit-exactly"):
        config = tiny_config(**{"fta.enabled": "false", "bda.enabled": "false",
                                "contrastive.enabled": "false"})
        sequences = tiny_sequences(n=2, frames=5)
        _, csv_path, _ = train(sequences, config, tmp_path / "run")
        pipeline_trace = read_trace(csv_path)
        bare = bare_train_trace(sequences, config)
        assert len(pipeline_trace) == len(bare) > 0
        for (det, ctr, total), expected in zip(pipeline_trace, bare):
            assert det == expected
            assert ctr == 0.0
            assert total == expected


OVERFIT_SETS = ["data.input_size=[64,64]", "train.batch_size=8",
                "train.learning_rate=1e-3", "train.min_learning_rate=1e-4",
                "train.epochs=200", "data.augment.enabled=false",
                "infer.score_threshold=0.3"]


def test_criterion_07_overfit_sanity():
    with criterion(7, "overfit sanity: training-set F1 >= 0.9 within 200 epochs"):
        start = time.time()
        sequences = _dataset(8, 30, 100, size=64, target_size_range=(10.0, 16.0),
                             velocity_range=(0.5, 3.0), contrast=0.5,
                             jitter_amplitude=1.0)
        config, _ = load_config(None, OVERFIT_SETS)
        model = build_model(config)
        rng = np.random.default_rng(config.seed)
        optimizer = make_optimizer(model, config)
        scheduler = make_scheduler(optimizer, config)
        pairs = build_frame_pairs(sequences)

        best = 0.0
        for epoch in range(1, config.train.epochs + 1):
            order = rng.permutation(len(pairs))
            for s in range(0, len(order), config.train.batch_size):
                batch = [augment(pairs[i], rng, config.data.input_size,
                                 config.data.augment)
                         for i in order[s: s + config.train.batch_size]]
                train_step(batch, model, optimizer, config, rng)
            scheduler.step()
            if epoch % 5 == 0:
                metrics = _split_f1(model, config, sequences, threshold=0.3)
                best = max(best, metrics["f1"])
                print(f"  epoch {epoch}: train F1 {metrics['f1']:.3f}")
                if metrics["f1"] >= 0.9:
                    break
        elapsed = time.time() - start
        print(f"  reached F1 {best:.3f} in {elapsed:.0f}s")
        assert best >= 0.9
        assert elapsed < 1800.0


ABLATION_SETS = ["data.input_size=[48,48]", "train.batch_size=8",
                 "train.learning_rate=1e-3", "train.min_learning_rate=2e-4",
                 "train.epochs=25", "data.augment.crop=false",
                 "data.augment.rotate=false", "infer.score_threshold=0.3"]


def test_criterion_08_directional_ablation():
    with criterion(8, "full model >= bare baseline on a fast-motion held-out split"):
        distractors = dict(contrast=0.35, specular=True, jitter_amplitude=1.5,
                           occluders=True)
        train_seqs = (_dataset(5, 25, 500, velocity_range=(0.5, 3.0), **distractors)
                      + _dataset(5, 25, 700, velocity_range=(0.5, 3.0),
                                 visible_range=(0.4, 0.8), **distractors))
        fast_seqs = _dataset(4, 20, 900, velocity_range=(1.0, 1.8), **distractors)

        scores = []
        for seq in fast_seqs:
            scores.extend(motion_iou(seq).values())
        mean_motion = float(np.mean(scores))
        print(f"  held-out mean motion IoU {mean_motion:.3f} (fast: <= 0.7)")
        assert mean_motion <= 0.7

        fulls, bases = [], []
        for seed in (0, 1, 2):
            full_cfg, _ = load_config(None, ABLATION_SETS + [f"seed={seed}"])
            base_cfg, _ = load_config(None, ABLATION_SETS + [
                f"seed={seed}", "fta.enabled=false", "bda.enabled=false",
                "contrastive.enabled=false"])
            full_f1 = _split_f1(_train(full_cfg, train_seqs), full_cfg, fast_seqs)["f1"]
            base_f1 = _split_f1(_train(base_cfg, train_seqs), base_cfg, fast_seqs)["f1"]
            fulls.append(full_f1)
            bases.append(base_f1)
            print(f"  seed {seed}: full F1 {full_f1:.3f} vs baseline F1 {base_f1:.3f}")

        mean_full, mean_base = float(np.mean(fulls)), float(np.mean(bases))
        delta = 100 * (mean_full - mean_base)
        print(f"  mean full {mean_full:.3f} vs baseline {mean_base:.3f}: "
              f"delta {delta:+.1f} F1 points (full-scale reference: +9.2)")
        assert mean_full >= mean_base


def test_criterion_09_analyzer_fidelity():
    with criterion(9, "motion analyzer matches the analytic formula and exact bins"):
        # constant-velocity track from the generator itself; pick the first
        # seed whose path stays clear of boundary reflections
        seq = None
        for seed in range(30):
            params = SynthesisParams(image_size=(64, 160), num_frames=25,
                                     num_targets=1, target_size_range=(10.0, 10.0),
                                     velocities=((1.0, 0.0),), jitter_amplitude=1.0,
                                     seed=seed)
            candidate = generate_sequence(params)
            xs = [boxes[0].x1 for boxes in candidate.annotations]
            if all(b - a == 1 for a, b in zip(xs, xs[1:])):
                seq = candidate
                break
        assert seq is not None, "no reflection-free seed found"

        box = seq.annotations[0][0]
        width = box.x2 - box.x1
        scores = motion_iou(seq, window=10)
        mid = len(seq.frames) // 2
        analytic = np.mean([(width - abs(d)) / (width + abs(d))
                            for d in range(-10, 11) if d != 0])
        assert scores[(0, mid)] == pytest.approx(analytic, abs=1e-6)

        constructed = [1.0, 0.95, 0.8, 0.85, 0.75, 0.3, 0.6, 0.7, 0.1, 0.5]
        hist = speed_histogram(constructed)
        assert hist["slow"] == pytest.approx(2 / 10)
        assert hist["medium"] == pytest.approx(3 / 10)
        assert hist["fast"] == pytest.approx(5 / 10)


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "bit-identical retrains and checkpoint round trips"):
        config = tiny_config()
        sequences = tiny_sequences(n=2, frames=5)
        _, csv_a, ckpt_a = train(sequences, config, tmp_path / "a")
        _, csv_b, _ = train(sequences, config, tmp_path / "b")
        assert csv_a.read_bytes() == csv_b.read_bytes()

        model, model_config = checkpoint_load(ckpt_a)
        reload_model, reload_config = checkpoint_load(
            checkpoint_save(model, model_config, tmp_path / "again.pt"))
        frames = [image_to_tensor(f) for f in sequences[0].frames]
        out_a = infer_video(frames, model, model_config)
        out_b = infer_video(frames, reload_model, reload_config)
        assert [[dataclasses.astuple(d) for d in f] for f in out_a] == \
               [[dataclasses.astuple(d) for d in f] for f in out_b]
