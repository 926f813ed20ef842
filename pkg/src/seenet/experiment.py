"""Phantom benchmark: train both stages on synthetic lesions and score the
end-to-end click-to-measurement pipeline against analytic ground truth."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, PhantomSpec, generate_phantoms
from .errors import NoCandidate
from .evaluation import box_iou, froc, seg_scores, write_json_report, write_metrics_csv
from .geometry import Point2
from .nets import Detector, Refiner, load_checkpoint
from .pipeline import (
    TrainConfig,
    build_pseudo_labels,
    detect_all,
    make_click_guidance,
    measure,
    select_candidate,
    train_stage1,
    train_stage2,
    write_manifest,
)
from .nets import detector_forward
from .weak_labels import LesionLabel, sample_click

log = logging.getLogger(__name__)


def _bench_train_config() -> TrainConfig:
    return TrainConfig(
        seed=7,
        width_factor=0.15,
        stage1_epochs=4,
        stage2_epochs=3,
        epochs_scale=1.0,
    )


@dataclass(frozen=True)
class PhantomBenchmarkConfig:
    n_train: int = 2000
    n_test: int = 200
    train_seed: int = 101
    test_seed: int = 202
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=_bench_train_config)
    n_robust: int = 50
    robust_offset_px: float = 3.0
    detection_iou: float = 0.5


def _truth_click(mask: np.ndarray, seed: int) -> Point2:
    """Simulated user click: uniform over the 5-px-dilated lesion."""
    label = LesionLabel(classes=(mask > 0).astype(np.uint8), source="pseudo_grabcut")
    return sample_click(label, rng_seed=seed)


def evaluate_measurements(dataset: Dataset, detector: Detector, refiner: Refiner,
                          cfg: TrainConfig) -> tuple[list[dict], dict]:
    """Run measure() once per phantom (first lesion) against analytic truth."""
    rows = []
    for i, s in enumerate(dataset.samples):
        mask = s.masks[0]
        truth = s.records[0].recist()
        click = _truth_click(mask, seed=1000 + i)
        row = {"slice_id": s.slice_id}
        try:
            res = measure(s.image, s.spacing_mm_per_px, click, detector, refiner, cfg)
        except NoCandidate:
            row.update(dice_final=0.0, dice_initial=0.0, refined_better=False,
                       d_long_px=truth.long_px, d_short_px=truth.short_px,
                       no_candidate=True)
            rows.append(row)
            continue
        final = seg_scores(res.mask, mask)
        initial = seg_scores(res.initial_mask, mask)
        row.update(
            dice_final=final["dice"], dice_initial=initial["dice"],
            precision_final=final["precision"], recall_final=final["recall"],
            refined_better=final["dice"] > initial["dice"],
            d_long_px=abs(res.recist.long_px - truth.long_px),
            d_short_px=abs(res.recist.short_px - truth.short_px),
            d_long_mm=abs(res.recist.long_mm - truth.long_mm),
            d_short_mm=abs(res.recist.short_mm - truth.short_mm),
            no_candidate=False,
        )
        rows.append(row)
    agg = {
        "n": len(rows),
        "n_no_candidate": sum(r["no_candidate"] for r in rows),
        "dice_mean": float(np.mean([r["dice_final"] for r in rows])),
        "dice_initial_mean": float(np.mean([r["dice_initial"] for r in rows])),
        "refine_win_frac": float(np.mean([r["refined_better"] for r in rows])),
        "long_err_px_mean": float(np.mean([r["d_long_px"] for r in rows])),
        "short_err_px_mean": float(np.mean([r["d_short_px"] for r in rows])),
    }
    return rows, agg


def evaluate_detection(dataset: Dataset, detector: Detector, cfg: TrainConfig,
                       iou_thresh: float = 0.5) -> dict:
    """Click-free FROC plus with-click top-candidate recall."""
    predictions, truths = [], []
    for s in dataset.samples:
        predictions.append(detect_all(s.image, detector))
        truths.append([r.box for r in s.records])
    sens = froc(predictions, truths, iou_thresh=iou_thresh)

    hits = total = 0
    for i, s in enumerate(dataset.samples):
        for k, (r, mask) in enumerate(zip(s.records, s.masks)):
            click = _truth_click(mask, seed=5000 + 31 * i + k)
            g = make_click_guidance(s.image.shape, click, sigma_c=cfg.click_sigma)
            inp = np.stack([s.image, g.click_image, g.distance_image], axis=-1)
            det = detector_forward(detector, inp, score_thresh=cfg.score_thresh)
            total += 1
            try:
                cand = select_candidate(det.candidates, click, cfg.score_thresh)
            except NoCandidate:
                continue
            if box_iou(cand.box, r.box) > iou_thresh:
                hits += 1
    return {
        "froc": {str(k): v for k, v in sens.items()},
        "froc_sens_at_4fp": sens[4.0],
        "click_recall": hits / max(total, 1),
        "n_lesions": total,
    }


def evaluate_click_robustness(dataset: Dataset, detector: Detector, refiner: Refiner,
                              cfg: TrainConfig, n: int = 50,
                              offset_px: float = 3.0) -> dict:
    """Long-axis stability across paired clicks ``offset_px`` apart."""
    rel_diffs = []
    rng = np.random.default_rng(99)
    for i, s in enumerate(dataset.samples[:n]):
        mask = s.masks[0]
        h, w = s.image.shape
        c1 = _truth_click(mask, seed=7000 + i)
        c2 = None
        for _ in range(20):
            ang = rng.uniform(0, 2 * math.pi)
            cand = Point2(c1.x + offset_px * math.cos(ang),
                          c1.y + offset_px * math.sin(ang))
            if 0 <= cand.x < w and 0 <= cand.y < h:
                c2 = cand
                break
        if c2 is None:
            continue
        try:
            m1 = measure(s.image, s.spacing_mm_per_px, c1, detector, refiner, cfg)
            m2 = measure(s.image, s.spacing_mm_per_px, c2, detector, refiner, cfg)
        except NoCandidate:
            rel_diffs.append(1.0)  # an unstable pair by definition
            continue
        l1, l2 = m1.recist.long_px, m2.recist.long_px
        rel_diffs.append(abs(l1 - l2) / max(l1, l2, 1e-9))
    frac_stable = float(np.mean([d < 0.10 for d in rel_diffs])) if rel_diffs else 0.0
    return {
        "n_pairs": len(rel_diffs),
        "stable_frac": frac_stable,
        "rel_diff_mean": float(np.mean(rel_diffs)) if rel_diffs else 0.0,
    }


def run_phantom_benchmark(out_dir, bench: PhantomBenchmarkConfig | None = None,
                          reuse_checkpoints: bool = True) -> dict:
    """Full benchmark: generate, train both stages, evaluate, write reports.

    With ``reuse_checkpoints`` the stage checkpoints already present in
    ``out_dir`` are reused, so an interrupted run resumes after the slow part.
    """
    bench = bench or PhantomBenchmarkConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = bench.train
    t0 = time.perf_counter()

    log.info("generating %d train + %d test phantoms", bench.n_train, bench.n_test)
    train_ds = generate_phantoms(bench.spec, bench.n_train, bench.train_seed, split="train")
    test_ds = generate_phantoms(bench.spec, bench.n_test, bench.test_seed, split="test")

    ck1 = out / "stage1.ckpt"
    if not (reuse_checkpoints and ck1.exists()):
        log.info("building pseudo masks")
        pseudo = build_pseudo_labels(train_ds)
        log.info("training stage 1")
        ck1 = train_stage1(train_ds, cfg, out, pseudo_labels=pseudo)
    else:
        pseudo = None
        log.info("reusing %s", ck1)
    ck2 = out / "stage2.ckpt"
    if not (reuse_checkpoints and ck2.exists()):
        log.info("training stage 2")
        ck2 = train_stage2(train_ds, ck1, cfg, out, pseudo_labels=pseudo)
    else:
        log.info("reusing %s", ck2)

    detector, _ = load_checkpoint(ck1)
    refiner, _ = load_checkpoint(ck2)

    log.info("evaluating measurements on %d phantoms", len(test_ds))
    rows, seg_agg = evaluate_measurements(test_ds, detector, refiner, cfg)
    log.info("evaluating detection")
    det_agg = evaluate_detection(test_ds, detector, cfg, bench.detection_iou)
    log.info("evaluating click robustness")
    rob_agg = evaluate_click_robustness(test_ds, detector, refiner, cfg,
                                        n=bench.n_robust,
                                        offset_px=bench.robust_offset_px)

    metrics = {**seg_agg, **det_agg, "robustness": rob_agg,
               "runtime_s": time.perf_counter() - t0}
    write_metrics_csv(out / "metrics.csv", rows)
    write_json_report(out / "report.json", rows, metrics)
    write_manifest(out, cfg, extra={"benchmark": {
        "n_train": bench.n_train, "n_test": bench.n_test,
        "train_seed": bench.train_seed, "test_seed": bench.test_seed,
        "spec": asdict(bench.spec),
    }})
    log.info("benchmark metrics: %s", json.dumps(metrics, indent=2))
    return metrics
