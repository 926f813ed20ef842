"""Command-line interface: dataset generation, training, evaluation, batch
measurement, and the HTTP service."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import data as sdata
from . import evaluation as ev
from . import pipeline as pl
from .errors import SeenetError
from .experiment import evaluate_detection, evaluate_measurements
from .geometry import Point2
from .nets import detector_forward, load_checkpoint
from .service import measurement_payload

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "SEENET_DATA_ROOT"


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(2)


def _load_config(config_path, **overrides) -> pl.TrainConfig:
    cfg = pl.config_from_yaml(config_path) if config_path else pl.TrainConfig()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _resolve_data(data) -> Path:
    root = data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        _fail(f"no dataset given: pass --data or set {DATA_ROOT_ENV}")
    return Path(root)


def _load_models(ckpt1, ckpt2):
    detector, _ = load_checkpoint(ckpt1)
    refiner, _ = load_checkpoint(ckpt2)
    return detector, refiner


config_opt = click.option("--config", "config_path", type=click.Path(exists=True),
                          default=None, help="TrainConfig YAML")
seed_opt = click.option("--seed", type=int, default=None)
wf_opt = click.option("--width-factor", type=float, default=None)
scale_opt = click.option("--epochs-scale", type=float, default=None)
data_opt = click.option("--data", type=click.Path(), default=None,
                        help=f"dataset directory (default ${DATA_ROOT_ENV})")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s")


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--n", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--image-size", default=128, show_default=True)
@click.option("--split", default=None, help="fixed split label for every record")
def phantoms(out, n, seed, image_size, split):
    """Generate a phantom dataset with analytic ground truth."""
    spec = sdata.PhantomSpec(image_size=(image_size, image_size))
    try:
        ds = sdata.generate_phantoms(spec, n, seed, split=split)
    except (SeenetError, ValueError) as exc:
        _fail(str(exc))
    sdata.save_dataset(ds, out)
    pl.write_manifest(out, pl.TrainConfig(seed=seed),
                      extra={"command": "phantoms", "n": n})
    click.echo(f"wrote {n} phantoms to {out}")


@main.command("train-stage1")
@data_opt
@click.option("--out", required=True, type=click.Path())
@config_opt
@seed_opt
@wf_opt
@scale_opt
def train_stage1_cmd(data, out, config_path, seed, width_factor, epochs_scale):
    """Train the stage-1 detector on a dataset directory."""
    cfg = _load_config(config_path, seed=seed, width_factor=width_factor,
                       epochs_scale=epochs_scale)
    ds = sdata.load_dataset(_resolve_data(data))
    try:
        ckpt = pl.train_stage1(ds, cfg, out)
    except SeenetError as exc:
        _fail(str(exc))
    pl.write_manifest(out, cfg, extra={"command": "train-stage1"})
    click.echo(f"stage-1 checkpoint: {ckpt}")


@main.command("train-stage2")
@data_opt
@click.option("--stage1", "stage1_ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@config_opt
@seed_opt
@wf_opt
@scale_opt
@click.option("--no-adjusted-loi", is_flag=True,
              help="train on raw stage-1 crops without rotation")
def train_stage2_cmd(data, stage1_ckpt, out, config_path, seed, width_factor,
                     epochs_scale, no_adjusted_loi):
    """Train the stage-2 refiner from a stage-1 checkpoint."""
    cfg = _load_config(config_path, seed=seed, width_factor=width_factor,
                       epochs_scale=epochs_scale)
    if no_adjusted_loi:
        cfg = dataclasses.replace(cfg, use_adjusted_loi=False)
    ds = sdata.load_dataset(_resolve_data(data))
    try:
        ckpt = pl.train_stage2(ds, stage1_ckpt, cfg, out)
    except SeenetError as exc:
        _fail(str(exc))
    pl.write_manifest(out, cfg, extra={"command": "train-stage2"})
    click.echo(f"stage-2 checkpoint: {ckpt}")


def _eval_common(data, ckpt1, ckpt2, config_path):
    ds = sdata.load_dataset(_resolve_data(data))
    if not all(s.masks for s in ds.samples):
        _fail("evaluation needs a dataset with ground-truth masks")
    cfg = _load_config(config_path)
    detector, refiner = _load_models(ckpt1, ckpt2)
    return ds, cfg, detector, refiner


@main.command("eval-seg")
@data_opt
@click.option("--ckpt1", required=True, type=click.Path(exists=True))
@click.option("--ckpt2", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@config_opt
def eval_seg(data, ckpt1, ckpt2, out, config_path):
    """Pixel metrics of the final segmentation against analytic masks."""
    ds, cfg, detector, refiner = _eval_common(data, ckpt1, ckpt2, config_path)
    rows, agg = evaluate_measurements(ds, detector, refiner, cfg)
    _emit(rows, agg, out, cfg)


@main.command("eval-recist")
@data_opt
@click.option("--ckpt1", required=True, type=click.Path(exists=True))
@click.option("--ckpt2", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@config_opt
def eval_recist(data, ckpt1, ckpt2, out, config_path):
    """Diameter-length differences (mm) against analytic measurements."""
    ds, cfg, detector, refiner = _eval_common(data, ckpt1, ckpt2, config_path)
    rows, _ = evaluate_measurements(ds, detector, refiner, cfg)
    measured = [r for r in rows if not r["no_candidate"]]
    agg = {
        "n": len(rows),
        "n_no_candidate": len(rows) - len(measured),
        "long_mean_mm": float(np.mean([r["d_long_mm"] for r in measured])) if measured else None,
        "long_std_mm": float(np.std([r["d_long_mm"] for r in measured])) if measured else None,
        "short_mean_mm": float(np.mean([r["d_short_mm"] for r in measured])) if measured else None,
        "short_std_mm": float(np.std([r["d_short_mm"] for r in measured])) if measured else None,
    }
    _emit(rows, agg, out, cfg)


@main.command("eval-froc")
@data_opt
@click.option("--ckpt", "--ckpt1", "ckpt1", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@click.option("--no-click", is_flag=True,
              help="fully automatic detection over zeroed guidance channels")
@click.option("--click-repeats", default=1, show_default=True,
              help="clicks sampled per lesion in click-conditioned mode")
@config_opt
def eval_froc(data, ckpt1, out, no_click, click_repeats, config_path):
    """Detection FROC (sensitivity at average false positives per image)."""
    ds = sdata.load_dataset(_resolve_data(data))
    cfg = _load_config(config_path)
    detector, _ = load_checkpoint(ckpt1)
    if no_click:
        predictions = [pl.detect_all(s.image, detector) for s in ds.samples]
        truths = [[r.box for r in s.records] for s in ds.samples]
        sens = ev.froc(predictions, truths)
        agg = {"mode": "no_click", "froc": {str(k): v for k, v in sens.items()}}
        rows = [{"fp_per_image": k, "sensitivity": v} for k, v in sens.items()]
    else:
        if not all(s.masks for s in ds.samples):
            _fail("click-conditioned FROC needs a dataset with masks")
        predictions, truths = [], []
        from .geometry import make_click_guidance
        from .weak_labels import LesionLabel, sample_click

        for i, s in enumerate(ds.samples):
            boxes = [r.box for r in s.records]
            for k, mask in enumerate(s.masks):
                label = LesionLabel(classes=(mask > 0).astype(np.uint8),
                                    source="pseudo_grabcut")
                for rep in range(click_repeats):
                    click_pt = sample_click(label, rng_seed=9000 + 97 * i + 13 * k + rep)
                    g = make_click_guidance(s.image.shape, click_pt,
                                            sigma_c=cfg.click_sigma)
                    inp = np.stack([s.image, g.click_image, g.distance_image], axis=-1)
                    det = detector_forward(detector, inp, score_thresh=0.0)
                    predictions.append([(c.score, c.box) for c in det.candidates])
                    truths.append(boxes)
        sens = ev.froc(predictions, truths)
        agg = {"mode": "click", "click_repeats": click_repeats,
               "froc": {str(k): v for k, v in sens.items()}}
        rows = [{"fp_per_image": k, "sensitivity": v} for k, v in sens.items()]
    _emit(rows, agg, out, cfg)


@main.command("eval-detection")
@data_opt
@click.option("--ckpt", "--ckpt1", "ckpt1", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@config_opt
def eval_detection(data, ckpt1, out, config_path):
    """No-click FROC plus with-click top-candidate recall."""
    ds = sdata.load_dataset(_resolve_data(data))
    if not all(s.masks for s in ds.samples):
        _fail("detection evaluation needs a dataset with masks")
    cfg = _load_config(config_path)
    detector, _ = load_checkpoint(ckpt1)
    agg = evaluate_detection(ds, detector, cfg)
    _emit([], agg, out, cfg)


@main.command("measure")
@data_opt
@click.option("--slice-id", default=None, help="defaults to the first slice")
@click.option("--click", "click_str", required=True, metavar="X,Y")
@click.option("--ckpt1", required=True, type=click.Path(exists=True))
@click.option("--ckpt2", required=True, type=click.Path(exists=True))
@config_opt
def measure_cmd(data, slice_id, click_str, ckpt1, ckpt2, config_path):
    """Measure one lesion: prints contours, endpoints, and mm lengths."""
    try:
        x, y = (float(v) for v in click_str.split(","))
    except ValueError:
        _fail(f"--click expects X,Y, got {click_str!r}")
    ds = sdata.load_dataset(_resolve_data(data))
    sample = None
    if slice_id is None:
        sample = ds.samples[0]
    else:
        for s in ds.samples:
            if s.slice_id == slice_id:
                sample = s
                break
    if sample is None:
        _fail(f"unknown slice id {slice_id!r}")
    h, w = sample.image.shape
    if not (0 <= x < w and 0 <= y < h):
        _fail(f"click ({x}, {y}) outside {w}x{h} slice")
    cfg = _load_config(config_path)
    detector, refiner = _load_models(ckpt1, ckpt2)
    try:
        result = pl.measure(sample.image, sample.spacing_mm_per_px, Point2(x, y),
                            detector, refiner, cfg)
    except SeenetError as exc:
        _fail(str(exc))
    payload = {"slice_id": sample.slice_id, **measurement_payload(result)}
    click.echo(json.dumps(payload, indent=2))


@main.command()
@data_opt
@click.option("--ckpt1", required=True, type=click.Path(exists=True))
@click.option("--ckpt2", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True)
@click.option("--static-dir", type=click.Path(), default=None,
              help="UI bundle to serve at / (defaults to frontend/dist if present)")
@config_opt
def serve(data, ckpt1, ckpt2, host, port, static_dir, config_path):
    """Serve the measurement HTTP API (and the browser UI if built)."""
    from .service import serve as _serve

    cfg = _load_config(config_path)
    if static_dir is None:
        default_static = Path("frontend/dist")
        static_dir = default_static if default_static.is_dir() else None
    _serve(_resolve_data(data), ckpt1, ckpt2, host=host, port=port, cfg=cfg,
           static_dir=static_dir)


def _emit(rows, agg, out, cfg):
    if out:
        outp = Path(out)
        outp.mkdir(parents=True, exist_ok=True)
        if rows:
            ev.write_metrics_csv(outp / "metrics.csv", rows)
        ev.write_json_report(outp / "report.json", rows, agg)
        pl.write_manifest(outp, cfg)
    click.echo(json.dumps(agg, indent=2))


if __name__ == "__main__":
    main()
