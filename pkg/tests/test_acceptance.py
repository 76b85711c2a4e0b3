"""Headline acceptance criteria, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from gliomaseg import cli
from gliomaseg.labelfuse import FusionConfig, fuse, labels_to_channels
from gliomaseg.metrics import dice, hausdorff95, sensitivity, specificity
from gliomaseg.patching import PatchConfig, extract_patch, patches_phase1, patches_phase2, reconstruct
from gliomaseg.preprocess import BrainBox, fit_norm_stats, preprocess_subject
from gliomaseg.segnet import SegModelConfig, TrainConfig, build_model, predict_probs, train_phase
from gliomaseg.segnet.loss import dice_loss, dice_loss_grad, dice_loss_numpy
from gliomaseg.survival import (
    OSBucket,
    OSModelConfig,
    bucket,
    evaluate_os,
    extract_features,
    predict_os,
    train_os,
)
from gliomaseg.synthetic import make_subject, sphere_labels, write_subject
from gliomaseg.volume_io import load_volume
from oracles import confusion_counts, gradient_sum
from oracles import hd95 as hd95_oracle

from test_survival import _linear_fixture


def _covers(specs, box):
    """Exact union-covers-box test on a grid compressed to the patch boundaries."""
    cuts = []
    for ax in range(3):
        lo, stop = box.lo[ax], box.hi[ax] + 1
        pts = {lo, stop}
        for s in specs:
            pts.update(v for v in (s.start[ax], s.stop[ax]) if lo < v < stop)
        cuts.append(sorted(pts))
    covered = np.zeros([len(c) - 1 for c in cuts], dtype=bool)
    for s in specs:
        sl = []
        for ax, c in enumerate(cuts):
            a = np.searchsorted(c, max(s.start[ax], c[0]))
            b = np.searchsorted(c, min(s.stop[ax], c[-1]))
            sl.append(slice(a, b))
        covered[tuple(sl)] = True
    return bool(covered.all())


@pytest.mark.acceptance("normalization suite")
def test_normalization_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    subjects = [make_subject(f"N{i}", (48, 48, 40), rng, noise=rng.uniform(5, 40)) for i in range(10)]
    stats = fit_norm_stats(subjects)
    for s in subjects:
        pre = preprocess_subject(s, stats)
        for c in range(4):
            img = pre.image[c].astype(np.float64)
            brain = s.stack()[c] != 0
            inside = img[brain]
            assert abs(inside.min() - 10.0) <= 1e-6 and abs(inside.max() - 110.0) <= 1e-6
            assert np.all((inside >= 10.0 - 1e-6) & (inside <= 110.0 + 1e-6))
            assert np.all(img[~brain] == 0.0)
    assert time.perf_counter() - t0 < 10.0


@pytest.mark.acceptance("patch geometry")
def test_patch_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    cfg = PatchConfig()
    p = cfg.patch_size
    for _ in range(200):
        extent = rng.integers(1, 241, size=3)
        lo = rng.integers(0, 20, size=3)
        box = BrainBox(tuple(int(v) for v in lo), tuple(int(v) for v in lo + extent - 1))
        phase1 = patches_phase1(box, cfg, rng)  # rng draws the 0..4 start offsets
        phase2 = patches_phase2(box, cfg)
        assert _covers(phase1 + phase2, box)
        assert _covers(phase1, box) and _covers(phase2, box)
        for corner in itertools.product((0, 1), repeat=3):
            def flush(spec):
                for ax, side in enumerate(corner):
                    if box.extent[ax] < p:
                        continue
                    if side == 0 and spec.start[ax] != box.lo[ax]:
                        return False
                    if side == 1 and spec.stop[ax] != box.hi[ax] + 1:
                        return False
                return True
            assert any(flush(s) for s in phase2)
    assert time.perf_counter() - t0 < 5.0


@pytest.mark.acceptance("reconstruction round trip")
def test_reconstruction_round_trip():
    rng = np.random.default_rng(300)
    cfg = PatchConfig(patch_size=32, overlap=8)
    for shape in [(70, 60, 50), (40, 90, 33), (20, 20, 20)]:
        field = rng.uniform(size=(3,) + shape)
        lo = tuple(int(rng.integers(0, n // 4)) for n in shape)
        hi = tuple(int(rng.integers(3 * n // 4, n)) for n in shape)
        box = BrainBox(lo, hi)
        specs = patches_phase2(box, cfg)
        out = reconstruct([extract_patch(field, s) for s in specs], specs, shape)
        covered = np.zeros(shape, dtype=bool)
        for s in specs:
            covered[tuple(slice(max(a, 0), b) for a, b in zip(s.start, s.stop))] = True
        assert covered[box.slices()].all()
        assert np.max(np.abs(out[:, covered] - field[:, covered])) <= 1e-6


@pytest.mark.acceptance("loss range, optimum and gradient")
def test_loss():
    rng = np.random.default_rng(400)
    for _ in range(1000):
        shape = (3,) + tuple(int(v) for v in rng.integers(1, 7, size=3))
        target = (rng.uniform(size=shape) < rng.uniform()).astype(np.float32)
        pred = rng.uniform(size=shape).astype(np.float32)
        v = float(dice_loss(torch.from_numpy(target), torch.from_numpy(pred)))
        assert -1.5 <= v <= 0.0

    target = np.zeros((3, 8, 8, 8))
    target[0, 1:7, 1:7, 1:7] = 1
    target[1, 2:6, 2:6, 2:6] = 1
    target[2, 3:5, 3:5, 3:5] = 1
    t = torch.from_numpy(target)
    assert abs(float(dice_loss(t, t)) + 1.5) <= 1e-4

    h = 1e-6
    for _ in range(5):
        target = (rng.uniform(size=(3, 4, 4, 4)) < 0.4).astype(np.float64)
        pred = rng.uniform(0.05, 0.95, size=(3, 4, 4, 4))
        grad = dice_loss_grad(target, pred)
        fd = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            up, dn = pred.copy(), pred.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (dice_loss_numpy(target, up) - dice_loss_numpy(target, dn)) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-12)
        assert rel.max() <= 1e-3
        p = torch.from_numpy(pred).requires_grad_()
        dice_loss(torch.from_numpy(target), p).backward()
        np.testing.assert_allclose(p.grad.numpy(), grad, rtol=1e-9, atol=1e-12)


@pytest.mark.acceptance("metrics oracle")
def test_metrics_oracle():
    rng = np.random.default_rng(500)
    for i in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 9, size=3))
        a = rng.uniform(size=shape) < rng.uniform(0.05, 0.7)
        b = rng.uniform(size=shape) < rng.uniform(0.05, 0.7)
        if i % 10 == 0:
            b = np.zeros(shape, bool)
        if i % 25 == 0:
            a = np.zeros(shape, bool)
        spacing = (1.0, 1.0, 1.0) if i % 2 else tuple(float(v) for v in rng.uniform(0.5, 3.0, 3))
        tp, fp, fn, tn = confusion_counts(a, b)
        assert dice(a, b) == (1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        assert sensitivity(a, b) == (1.0 if tp + fn == 0 else tp / (tp + fn))
        assert specificity(a, b) == (1.0 if tn + fp == 0 else tn / (tn + fp))
        got, want = hausdorff95(a, b, spacing), hd95_oracle(a, b, spacing)
        if math.isinf(want) or want == 0.0:
            assert got == want
        else:
            assert abs(got - want) <= 1e-9

    empty = np.zeros((4, 4, 4), bool)
    some = empty.copy()
    some[1, 2, 3] = True
    assert dice(empty, empty) == 1.0 and sensitivity(empty, empty) == 1.0 and specificity(empty, empty) == 1.0
    assert hausdorff95(empty, empty) == 0.0
    assert hausdorff95(empty, some) == math.inf and hausdorff95(some, empty) == math.inf
    assert dice(empty, some) == 0.0 and dice(some, empty) == 0.0


@pytest.mark.acceptance("fusion")
def test_fusion():
    # every labelling of a 2x2x2 block, laid out as one (65536, 8, 1) volume
    maps = np.array(list(itertools.product((0, 1, 2, 4), repeat=8)), dtype=np.int16)[:, :, None]
    np.testing.assert_array_equal(fuse(labels_to_channels(maps)), maps)

    rng = np.random.default_rng(600)
    cfg = FusionConfig()
    t = cfg.threshold
    triples = rng.uniform(size=(1000, 3))
    triples[::7] = np.round(triples[::7] * 2) / 2  # exact threshold hits
    labels = fuse(triples.T.reshape(3, 1000, 1, 1), cfg).ravel()
    for (wt, tc, et), lab in zip(triples, labels):
        if et >= t:
            assert lab == 4
        elif tc >= t:
            assert lab == 1
        elif wt >= t:
            assert lab == 2
        else:
            assert lab == 0


@pytest.mark.acceptance("smoke training")
def test_smoke_training():
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    shape = (40, 40, 40)
    subjects = []
    for i, center in enumerate([(18, 20, 21), (22, 19, 18)]):
        s = make_subject(f"SM{i}", shape, np.random.default_rng(700 + i), noise=10.0)
        s.label = sphere_labels(shape, center, (3.0, 5.5, 9.0))
        s.label[s.stack()[0] == 0] = 0
        subjects.append(s)
    stats = fit_norm_stats(subjects)
    pre = [preprocess_subject(s, stats) for s in subjects]

    mcfg = SegModelConfig(patch_size=32, depth=3, base_filters=8)
    pcfg = PatchConfig(patch_size=32, overlap=8)
    tcfg = TrainConfig(lr=5e-3, epochs=1000, max_steps=150, seed=0,
                       augment={"flip": False, "rotation": False, "distortion": False})
    trace = []
    model, _ = train_phase(build_model(mcfg, 0), pre, "phase1", tcfg, pcfg, loss_trace=trace)
    assert len(trace) == 150
    assert np.mean(trace[-20:]) < np.mean(trace[:20])

    for p in pre:
        labels = fuse(predict_probs(model, p.image, pcfg, p.box))
        wt = dice(labels > 0, p.label > 0)
        print(f"{p.id}: training WT dice {wt:.3f}")
        assert wt >= 0.7
    assert time.perf_counter() - t0 < 600.0


@pytest.mark.acceptance("survival")
def test_survival():
    rng = np.random.default_rng(800)
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(4, 12, size=3))
        labels = rng.choice(np.array([0, 1, 2, 4], dtype=np.int16), size=shape, p=[0.55, 0.15, 0.15, 0.15])
        brain = (labels > 0) | (rng.uniform(size=shape) < 0.6)
        age = float(rng.uniform(20, 85))
        for mode in ("magnitude", "count"):
            f = extract_features(labels, brain, age, mode)
            n = int(brain.sum())
            wt, tc, et = labels > 0, (labels == 1) | (labels == 4), labels == 4
            assert f.ratio_WT == int(wt.sum()) / n
            assert f.ratio_TC == int(tc.sum()) / n
            assert f.ratio_ET == int(et.sum()) / n
            for got, mask in ((f.surface_WT, wt), (f.surface_TC, tc), (f.surface_ET, et)):
                assert got == pytest.approx(gradient_sum(mask, mode), rel=1e-12, abs=1e-12)
            assert f.age == age
            assert f.ratio_ET <= f.ratio_TC <= f.ratio_WT

    assert bucket(299) is OSBucket.SHORT
    assert bucket(300) is OSBucket.MID
    assert bucket(450) is OSBucket.MID
    assert bucket(451) is OSBucket.LONG

    x, days = _linear_fixture(150, np.random.default_rng(801))
    model = train_os(x[:100], days[:100], OSModelConfig(), seed=0)
    acc = evaluate_os(predict_os(model, x[100:]), days[100:])["accuracy"]
    print(f"held-out bucket accuracy {acc:.3f}")
    assert acc >= 0.8

    # buckets: short/short, mid/long, long/mid; squared errors 22500, 10000, 25600
    # ranks (1,2,3) vs (1,3,2): rho = 1 - 6*2/(3*8) = 0.5
    scores = evaluate_os([100, 400, 460], [250, 500, 300])
    assert scores["accuracy"] == 1 / 3
    assert scores["MSE"] == 58100 / 3
    assert scores["SpearmanR"] == 0.5


@pytest.mark.acceptance("end-to-end CLI smoke")
def test_cli_end_to_end(tmp_path):
    rng = np.random.default_rng(900)
    data = tmp_path / "data"
    for i in range(2):
        write_subject(make_subject(f"E2E{i}", (240, 240, 155), rng), data)
    cfg = {
        "data_root": str(data),
        "output_root": str(tmp_path / "out"),
        "patch": {"patch_size": 128, "overlap": 32},
        "model": {"patch_size": 128, "depth": 3, "base_filters": 2},
        "train": {"epochs": 0},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    for cmd in ("fit-stats", "preprocess", "train-seg", "predict-seg", "eval-seg"):
        assert cli.run([cmd, "--config", str(cfg_path)]) == 0, cmd
    for i in range(2):
        pred = load_volume(tmp_path / "out" / "predictions" / f"E2E{i}.nii.gz")
        assert pred.shape == (240, 240, 155)
        assert set(np.unique(pred.data).tolist()) <= {0, 1, 2, 4}
    report = (tmp_path / "out" / "reports" / "seg_eval.csv").read_text().splitlines()
    assert report[0].startswith("subject,region,dice")
    assert len(report) == 1 + 2 * 3 + 3
