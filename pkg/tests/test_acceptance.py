"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line with the measured value against its pinned tolerance.

The phantom end-to-end criteria share one trained benchmark run (a session
fixture). Set SEENET_BENCH_DIR to a directory with existing stage1.ckpt /
stage2.ckpt to reuse checkpoints during development; by default the run
trains from scratch (~1h on 2 CPU cores).
"""

import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from seenet import data as sd
from seenet import evaluation as ev
from seenet import geometry as geo
from seenet import nets
from seenet.experiment import PhantomBenchmarkConfig, run_phantom_benchmark
from seenet.geometry import Frame, Point2
from seenet.weak_labels import LesionLabel

from test_evaluation import _random_toy_set, _sweep_oracle
from test_nets import _check_grads, _label
from util import brute_force_long_axis, random_blob_mask


def _report(name: str, ok: bool, detail: str):
    line = f"[ACCEPTANCE] {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# geometry


def test_acceptance_geometry_oracle_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        size = int(rng.integers(24, 65))
        mask = random_blob_mask(rng, size=size)
        m = geo.recist_from_mask(mask, 1.0)
        if m.long_px != brute_force_long_axis(mask):
            mismatches += 1
    dt = time.perf_counter() - t0
    _report("geometry oracle suite",
            mismatches == 0 and dt < 30.0,
            f"200 masks, {mismatches} mismatches, {dt:.1f}s < 30s")


def test_acceptance_heatmap_round_trip():
    rng = np.random.default_rng(77)
    worst = 0.0
    for sigma in (1.0, 3.0):
        for _ in range(100):
            pts = rng.uniform(1.0, 26.0, size=(4, 2))
            if np.linalg.norm(pts[0] - pts[1]) < np.linalg.norm(pts[2] - pts[3]):
                pts = pts[[2, 3, 0, 1]]
            maps = geo.gaussian_maps(pts, (28, 28), sigma)
            back = geo.decode_points(maps)
            worst = max(worst, float(np.linalg.norm(back - pts, axis=1).max()))
    _report("heatmap encode->decode round trip", worst < 0.5,
            f"max error {worst:.3f}px < 0.5px at sigma in {{1,3}}")


def test_acceptance_loi_transform():
    rng = np.random.default_rng(4242)
    worst = 0.0
    n_points = 0
    while n_points < 1000:
        t = geo.LoiTransform(
            rotation_rad=rng.uniform(-math.pi, math.pi),
            crop_center=Point2(rng.uniform(20, 230), rng.uniform(20, 230)),
            crop_width_px=rng.uniform(16, 400),
        )
        pts = rng.uniform(0, 256, size=(50, 2))
        back = geo.invert_loi(t, points=geo.apply_loi(t, points=pts))
        worst = max(worst, float(np.abs(back - pts).max()))
        n_points += 50

    worst_slope = 0.0
    for _ in range(50):
        a = rng.uniform(30, 200, size=2)
        ang = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(12, 60)
        b = a + length * np.array([math.cos(ang), math.sin(ang)])
        mid = (a + b) / 2
        v = (length / 3) * np.array([-math.sin(ang), math.cos(ang)])
        m = geo.RecistMeasurement(
            long_a=Point2(*a), long_b=Point2(*b),
            short_a=Point2(*(mid - v / 2)), short_b=Point2(*(mid + v / 2)),
            spacing_mm_per_px=1.0)
        t = geo.plan_loi(m, box=(*(mid - length), *(mid + length)),
                         mask_centroid=Point2(*mid))
        la, lb = geo.apply_loi(t, points=np.stack([a, b]))
        slope = abs(math.atan2(lb[1] - la[1], lb[0] - la[0]))
        worst_slope = max(worst_slope, min(slope, abs(slope - math.pi)))
    ok = worst < 0.51 and worst_slope < 1e-3
    _report("LOI transform", ok,
            f"round trip {worst:.2e}px < 0.51px over 1000 pts; "
            f"post-transform slope {worst_slope:.2e} < 1e-3 rad")


# ---------------------------------------------------------------------------
# losses


def test_acceptance_loss_gradients():
    torch.manual_seed(11)
    tiny = nets.NetConfig(width_factor=0.05)

    model1 = nets.Detector(tiny)
    img = torch.rand(1, 3, 64, 64, dtype=torch.float64) * 255
    rois = [torch.tensor([[8.0, 10.0, 40.0, 38.0], [22.0, 20.0, 56.0, 52.0],
                          [4.0, 28.0, 26.0, 58.0]], dtype=torch.float64)]
    pos = torch.tensor([0, 1])
    gen = torch.Generator().manual_seed(5)
    targets = dict(
        cls_targets=torch.tensor([1, 1, 0]),
        box_targets=torch.rand(2, 4, generator=gen, dtype=torch.float64) * 0.2 - 0.1,
        pos_index=pos,
        mask_targets=torch.rand(2, 28, 28, generator=gen, dtype=torch.float64),
        recist_targets=torch.rand(2, 4, 28, 28, generator=gen, dtype=torch.float64),
    )

    def loss1():
        feat4, _ = model1.features(img)
        cls_logits, box_deltas = model1.head_box(feat4, rois)
        mask_logits, recist_maps = model1.head_pixels(feat4, [rois[0][pos]])
        total, _ = nets.loss_stage1(nets.Stage1Outputs(
            cls_logits=cls_logits, box_deltas=box_deltas,
            mask_logits=mask_logits, recist_maps=recist_maps, **targets))
        return total

    rel1 = _check_grads(model1, loss1, n=12, seed=1)

    model2 = nets.Refiner(tiny)
    x = torch.rand(1, 3, 256, 256, dtype=torch.float64) * 255
    rng = np.random.default_rng(8)
    classes = rng.choice([0, 1, 255], size=(256, 256), p=[0.6, 0.3, 0.1])
    label = _label(classes)
    target = torch.rand(1, 4, 256, 256,
                        generator=torch.Generator().manual_seed(6),
                        dtype=torch.float64)

    def loss2():
        prob, maps = model2(x)
        total, _ = nets.loss_stage2(prob, maps, label, target)
        return total

    rel2 = _check_grads(model2, loss2, n=8, seed=2)
    ok = rel1 < 1e-3 and rel2 < 1e-3
    _report("loss gradient checks (width factor 0.05)", ok,
            f"stage1 rel err {rel1:.2e}, stage2 rel err {rel2:.2e} < 1e-3")


def test_acceptance_uncertain_pixel_invariance():
    rng = np.random.default_rng(3)
    classes = rng.choice([0, 1, 255], size=(64, 64), p=[0.5, 0.3, 0.2]).astype(np.uint8)
    label = LesionLabel(classes=classes, source="refined")
    prob = torch.rand(1, 1, 64, 64, generator=torch.Generator().manual_seed(1))
    maps = torch.zeros(1, 4, 64, 64)
    _, base = nets.loss_stage2(prob, maps, label, maps.clone())
    exact = True
    for trial in range(5):
        noisy = prob.clone()
        unc = torch.from_numpy(classes == 255)
        noisy[0, 0][unc] = torch.rand(int(unc.sum()),
                                      generator=torch.Generator().manual_seed(trial))
        _, parts = nets.loss_stage2(noisy, maps, label, maps.clone())
        exact = exact and (parts["mask"] == base["mask"])
    _report("mask loss invariant to uncertain-pixel perturbation", exact,
            "exact equality over 5 random perturbations")


# ---------------------------------------------------------------------------
# FROC oracle


def test_acceptance_froc_oracle():
    rng = np.random.default_rng(555)
    fp_points = [0.5, 1, 2, 4, 8, 16]
    checked = 0
    exact = True
    while checked < 50:
        predictions, truths = _random_toy_set(rng)
        if sum(len(t) for t in truths) == 0:
            continue
        got = list(ev.froc(predictions, truths, fp_points=fp_points).values())
        want = _sweep_oracle(predictions, truths, fp_points)
        exact = exact and (got == want)
        checked += 1
    _report("FROC greedy evaluator vs threshold-sweep oracle", exact,
            f"{checked} random toy sets, exact equality")


# ---------------------------------------------------------------------------
# phantom end-to-end (shared trained benchmark)


@pytest.fixture(scope="session")
def phantom_bench(tmp_path_factory):
    out = os.environ.get("SEENET_BENCH_DIR")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
    else:
        out = tmp_path_factory.mktemp("bench")
    bench = PhantomBenchmarkConfig()
    assert bench.train.width_factor <= 0.25
    return run_phantom_benchmark(out, bench, reuse_checkpoints=True)


@pytest.mark.slow
def test_acceptance_phantom_end_to_end(phantom_bench):
    m = phantom_bench
    ok = (m["dice_mean"] >= 0.85 and m["long_err_px_mean"] <= 3.0
          and m["refine_win_frac"] >= 0.80 and m["runtime_s"] <= 7200)
    _report(
        "phantom end-to-end (2000 train / 200 held-out)", ok,
        f"dice {m['dice_mean']:.3f} >= 0.85; long err {m['long_err_px_mean']:.2f}px"
        f" <= 3px; stage2>stage1 on {m['refine_win_frac']:.0%} >= 80%;"
        f" runtime {m['runtime_s']/60:.0f}min <= 2h",
    )


@pytest.mark.slow
def test_acceptance_phantom_froc(phantom_bench):
    m = phantom_bench
    ok = m["froc_sens_at_4fp"] >= 0.85 and m["click_recall"] >= 0.95
    _report(
        "phantom FROC + click ordering", ok,
        f"no-click sensitivity@4FP {m['froc_sens_at_4fp']:.3f} >= 0.85; "
        f"with-click top-candidate recall {m['click_recall']:.3f} >= 0.95",
    )


@pytest.mark.slow
def test_acceptance_click_robustness(phantom_bench):
    rob = phantom_bench["robustness"]
    ok = rob["n_pairs"] >= 50 and rob["stable_frac"] >= 0.90
    _report(
        "click robustness (paired clicks 3px apart)", ok,
        f"{rob['n_pairs']} pairs, long-axis diff <10% in {rob['stable_frac']:.0%} >= 90%",
    )
