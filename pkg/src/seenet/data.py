"""Datasets: synthetic lesion phantoms with exact ground truth, plus a
DeepLesion-style CSV/PNG ingestion path.

On-disk layout of a phantom dataset directory:
    meta.yaml           generation parameters + intensity convention
    annotations.csv     one row per lesion (see CSV_COLUMNS)
    images/*.png        16-bit grayscale slices
    masks/*.png         16-bit instance-label maps (lesion k has value k+1)
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from .errors import MalformedRow, MissingFile, SpecInfeasible
from .geometry import RecistMeasurement, recist_from_mask
from skimage.draw import polygon as _draw_polygon

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "image", "mask", "lesion_index", "patient_id", "study_id", "series_id",
    "split", "spacing_mm_per_px", "x0", "y0", "x1", "y1",
    "mx1", "my1", "mx2", "my2", "mx3", "my3", "mx4", "my4",
]


@dataclass(frozen=True)
class PhantomSpec:
    """Generation parameters for synthetic lesion slices."""

    image_size: tuple[int, int] = (128, 128)
    lesion_count: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (7.0, 24.0)
    aspect_range: tuple[float, float] = (0.45, 1.0)
    exponent_range: tuple[float, float] = (1.6, 3.5)
    wobble_amp: float = 0.10
    contrast_range: tuple[float, float] = (0.2, 0.8)
    blur_sigma_range: tuple[float, float] = (0.0, 2.0)
    background_level: float = 40.0
    texture_noise: float = 8.0
    pixel_noise: float = 3.0
    spacing_mm_per_px: float = 0.8
    min_separation_px: float = 6.0
    images_per_patient: int = 4


@dataclass(frozen=True)
class AnnotationRecord:
    """One lesion annotation: measurement endpoints, box, and identifiers."""

    image_path: str
    coords: tuple[float, ...]  # (lax, lay, lbx, lby, sax, say, sbx, sby)
    box: tuple[float, float, float, float]
    spacing_mm_per_px: float
    patient_id: str
    study_id: str
    series_id: str
    split: str
    lesion_index: int = 0
    mask_path: str | None = None

    def validate(self):
        if len(self.coords) != 8:
            raise ValueError(f"need 8 measurement coordinates, got {len(self.coords)}")
        xs, ys = self.coords[0::2], self.coords[1::2]
        x0, y0, x1, y1 = self.box
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"box {self.box} has non-positive extent")
        eps = 1e-6
        if min(xs) < x0 - eps or max(xs) > x1 + eps or min(ys) < y0 - eps or max(ys) > y1 + eps:
            raise ValueError("box does not contain the measurement segments")

    def recist(self) -> RecistMeasurement:
        from .geometry import Point2

        c = self.coords
        return RecistMeasurement(
            long_a=Point2(c[0], c[1]), long_b=Point2(c[2], c[3]),
            short_a=Point2(c[4], c[5]), short_b=Point2(c[6], c[7]),
            spacing_mm_per_px=self.spacing_mm_per_px,
        )


@dataclass
class SliceSample:
    """One slice with its annotations and (for phantoms) analytic masks."""

    slice_id: str
    image: np.ndarray  # float32 HxW, windowed to [0, 255]
    spacing_mm_per_px: float
    records: list[AnnotationRecord]
    masks: list[np.ndarray] | None = None  # analytic lesion masks, same order


@dataclass
class Dataset:
    samples: list[SliceSample]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def subset(self, split: str) -> "Dataset":
        keep = [s for s in self.samples
                if s.records and s.records[0].split == split]
        return Dataset(samples=keep, meta=dict(self.meta))


def assign_split(patient_id: str, seed: int, val_fraction: float = 0.1) -> str:
    """Deterministic patient-level train/val assignment."""
    digest = hashlib.sha1(f"{seed}:{patient_id}".encode()).hexdigest()
    frac = int(digest[:12], 16) / float(16**12)
    return "val" if frac < val_fraction else "train"


# ---------------------------------------------------------------------------
# Phantom generation


def _superellipse_mask(shape, cx, cy, a, b, n, theta, wobble) -> np.ndarray:
    h, w = shape
    Y, X = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = X - cx, Y - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    rho = (np.abs(u / a) ** n + np.abs(v / b) ** n) ** (1.0 / n)
    phi = np.arctan2(v, u)
    mod = np.ones_like(rho)
    for k, (amp, ph) in enumerate(wobble, start=2):
        mod += amp * np.cos(k * phi + ph)
    return rho <= mod


def _single_component(mask: np.ndarray) -> bool:
    if mask.sum() < 3:
        return False
    _, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(2, 2))
    return n == 1


def generate_phantoms(
    spec: PhantomSpec,
    n: int,
    seed: int,
    split: str | None = None,
) -> Dataset:
    """Generate ``n`` phantom slices with exact masks and measurements.

    Deterministic for a given (spec, n, seed). Lesions never overlap; when a
    lesion cannot be placed in 1000 attempts the spec is deemed infeasible.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    h, w = spec.image_size
    samples = []
    for i in range(n):
        patient_id = f"P{i // spec.images_per_patient:05d}"
        slice_id = f"phantom_{seed}_{i:05d}"
        sp = split or assign_split(patient_id, seed)

        count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
        occupied = np.zeros((h, w), dtype=bool)
        masks: list[np.ndarray] = []
        for _ in range(count):
            placed = False
            for _attempt in range(1000):
                a = rng.uniform(*spec.radius_range)
                b = a * rng.uniform(*spec.aspect_range)
                nexp = rng.uniform(*spec.exponent_range)
                theta = rng.uniform(0, math.pi)
                wobble = [(rng.uniform(0, spec.wobble_amp), rng.uniform(0, 2 * math.pi))
                          for _ in range(2)]
                margin = a * (1 + 2 * spec.wobble_amp) + 3
                if 2 * margin >= min(h, w):
                    continue
                cx = rng.uniform(margin, w - 1 - margin)
                cy = rng.uniform(margin, h - 1 - margin)
                mask = _superellipse_mask((h, w), cx, cy, a, b, nexp, theta, wobble)
                if not _single_component(mask):
                    continue
                grown = ndimage.binary_dilation(
                    mask, iterations=int(math.ceil(spec.min_separation_px)))
                if (grown & occupied).any():
                    continue
                occupied |= grown
                masks.append(mask)
                placed = True
                break
            if not placed:
                raise SpecInfeasible(
                    f"could not place lesion {len(masks) + 1} of {count} on slice {i}")

        img = np.full((h, w), spec.background_level, dtype=np.float64)
        if spec.texture_noise > 0:
            tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=6.0)
            img += tex * (spec.texture_noise / max(tex.std(), 1e-9))
        for mask in masks:
            img[mask] += rng.uniform(*spec.contrast_range) * 255.0
        blur = rng.uniform(*spec.blur_sigma_range)
        if blur > 0:
            img = ndimage.gaussian_filter(img, sigma=blur)
        if spec.pixel_noise > 0:
            img += rng.standard_normal((h, w)) * spec.pixel_noise
        img = np.clip(img, 0.0, 255.0).astype(np.float32)

        records = []
        for k, mask in enumerate(masks):
            m = recist_from_mask(mask, spec.spacing_mm_per_px)
            ys, xs = np.nonzero(mask)
            box = (float(xs.min()) - 0.5, float(ys.min()) - 0.5,
                   float(xs.max()) + 0.5, float(ys.max()) + 0.5)
            rec = AnnotationRecord(
                image_path=f"images/{slice_id}.png",
                coords=tuple(float(v) for v in m.endpoints().ravel()),
                box=box,
                spacing_mm_per_px=spec.spacing_mm_per_px,
                patient_id=patient_id,
                study_id=f"ST{i:05d}",
                series_id="1",
                split=sp,
                lesion_index=k,
                mask_path=f"masks/{slice_id}.png",
            )
            rec.validate()
            records.append(rec)

        samples.append(SliceSample(
            slice_id=slice_id, image=img, spacing_mm_per_px=spec.spacing_mm_per_px,
            records=records, masks=masks,
        ))
    meta = {
        "kind": "phantom", "seed": seed, "n": n,
        "spec": asdict(spec),
        "intensity": {"mode": "scaled8"},  # uint16 = round(value/255 * 65535)
    }
    return Dataset(samples=samples, meta=meta)


def recist_quadrilateral_mask(recist: RecistMeasurement, shape) -> np.ndarray:
    """Rasterized quadrilateral spanned by the four endpoints."""
    pts = recist.endpoints()[[0, 2, 1, 3]]
    rr, cc = _draw_polygon(pts[:, 1], pts[:, 0], shape=shape)
    quad = np.zeros(shape, dtype=bool)
    quad[rr, cc] = True
    return quad


# ---------------------------------------------------------------------------
# Persistence


def _write_png16(path: Path, arr: np.ndarray):
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _read_png16(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    return np.asarray(Image.open(path), dtype=np.uint16)


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in ds.samples:
        raw = np.rint(s.image / 255.0 * 65535.0).astype(np.uint16)
        _write_png16(out / "images" / f"{s.slice_id}.png", raw)
        if s.masks is not None:
            inst = np.zeros(s.image.shape, dtype=np.uint16)
            for k, m in enumerate(s.masks):
                inst[m] = k + 1
            _write_png16(out / "masks" / f"{s.slice_id}.png", inst)
        for r in s.records:
            rows.append({
                "image": r.image_path, "mask": r.mask_path or "",
                "lesion_index": r.lesion_index, "patient_id": r.patient_id,
                "study_id": r.study_id, "series_id": r.series_id, "split": r.split,
                "spacing_mm_per_px": repr(r.spacing_mm_per_px),
                **{k: repr(v) for k, v in zip(["x0", "y0", "x1", "y1"], r.box)},
                **{k: repr(v) for k, v in zip(
                    ["mx1", "my1", "mx2", "my2", "mx3", "my3", "mx4", "my4"], r.coords)},
            })
    with (out / "annotations.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    (out / "meta.yaml").write_text(yaml.safe_dump(ds.meta, sort_keys=True))
    return out


def load_dataset(dataset_dir) -> Dataset:
    """Load a dataset directory written by :func:`save_dataset`."""
    root = Path(dataset_dir)
    meta_path = root / "meta.yaml"
    if not meta_path.exists():
        raise MissingFile(str(meta_path))
    meta = yaml.safe_load(meta_path.read_text())
    csv_path = root / "annotations.csv"
    if not csv_path.exists():
        raise MissingFile(str(csv_path))

    by_image: dict[str, list[AnnotationRecord]] = {}
    with csv_path.open(newline="") as fh:
        for rownum, row in enumerate(csv.DictReader(fh), start=2):
            rec = _parse_row(row, rownum)
            by_image.setdefault(rec.image_path, []).append(rec)

    samples = []
    for image_path, records in by_image.items():
        records.sort(key=lambda r: r.lesion_index)
        raw = _read_png16(root / image_path)
        img = (raw.astype(np.float32) / 65535.0) * 255.0
        masks = None
        if records[0].mask_path:
            inst = _read_png16(root / records[0].mask_path)
            masks = [(inst == r.lesion_index + 1) for r in records]
        samples.append(SliceSample(
            slice_id=Path(image_path).stem, image=img,
            spacing_mm_per_px=records[0].spacing_mm_per_px,
            records=records, masks=masks,
        ))
    samples.sort(key=lambda s: s.slice_id)
    return Dataset(samples=samples, meta=meta)


def _parse_row(row: dict, rownum: int) -> AnnotationRecord:
    try:
        coords = tuple(float(row[k]) for k in
                       ["mx1", "my1", "mx2", "my2", "mx3", "my3", "mx4", "my4"])
        box = tuple(float(row[k]) for k in ["x0", "y0", "x1", "y1"])
        rec = AnnotationRecord(
            image_path=row["image"], coords=coords, box=box,
            spacing_mm_per_px=float(row["spacing_mm_per_px"]),
            patient_id=row["patient_id"], study_id=row["study_id"],
            series_id=row["series_id"], split=row["split"],
            lesion_index=int(row.get("lesion_index") or 0),
            mask_path=row.get("mask") or None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRow(rownum, str(exc)) from exc
    return rec


# ---------------------------------------------------------------------------
# DeepLesion-style ingestion


@dataclass(frozen=True)
class IngestConfig:
    """Raw-intensity and split conventions for external CSV datasets."""

    intensity_offset: float = 32768.0  # raw = HU + offset
    window_center: float = 40.0
    window_width: float = 400.0
    split_seed: int = 0
    val_fraction: float = 0.1
    # csv column names -> our names; identity by default
    column_map: dict | None = None


def apply_window(raw: np.ndarray, center: float, width: float) -> np.ndarray:
    """Linear CT windowing onto [0, 255] with clamping."""
    lo = center - width / 2.0
    out = (np.asarray(raw, dtype=np.float64) - lo) / width * 255.0
    return np.clip(out, 0.0, 255.0).astype(np.float32)


def load_deeplesion(csv_path, image_root, config: IngestConfig = IngestConfig()) -> Dataset:
    """Load an external RECIST-annotated dataset from CSV + 16-bit PNGs.

    Structural row defects raise MalformedRow (with the row number); rows
    failing semantic invariants are skipped with a warning. Split labels in
    the CSV are respected; missing ones get a deterministic patient-level
    train/val assignment.
    """
    csv_path = Path(csv_path)
    image_root = Path(image_root)
    if not csv_path.exists():
        raise MissingFile(str(csv_path))
    cmap = config.column_map or {}

    def col(row, name):
        key = cmap.get(name, name)
        if key not in row or row[key] in (None, ""):
            raise KeyError(name)
        return row[key]

    by_image: dict[str, list[AnnotationRecord]] = {}
    with csv_path.open(newline="") as fh:
        for rownum, row in enumerate(csv.DictReader(fh), start=2):
            try:
                coords = tuple(float(v) for v in
                               str(col(row, "measurement_coordinates")).split(","))
                if len(coords) != 8:
                    raise ValueError(f"need 8 measurement coordinates, got {len(coords)}")
                box = tuple(float(v) for v in str(col(row, "bounding_box")).split(","))
                if len(box) != 4:
                    raise ValueError(f"need 4 box coordinates, got {len(box)}")
                patient = str(col(row, "patient_id"))
                try:
                    split = str(col(row, "split"))
                except KeyError:
                    split = assign_split(patient, config.split_seed, config.val_fraction)
                rec = AnnotationRecord(
                    image_path=str(col(row, "image")), coords=coords, box=box,
                    spacing_mm_per_px=float(col(row, "spacing_mm_per_px")),
                    patient_id=patient, study_id=str(col(row, "study_id")),
                    series_id=str(col(row, "series_id")), split=split,
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRow(rownum, str(exc)) from exc
            try:
                rec.validate()
                rec.recist()
            except ValueError as exc:
                log.warning("skipping row %d: %s", rownum, exc)
                continue
            by_image.setdefault(rec.image_path, []).append(rec)

    samples = []
    for image_path, records in sorted(by_image.items()):
        raw = _read_png16(image_root / image_path)
        hu = raw.astype(np.float64) - config.intensity_offset
        img = apply_window(hu, config.window_center, config.window_width)
        samples.append(SliceSample(
            slice_id=Path(image_path).stem, image=img,
            spacing_mm_per_px=records[0].spacing_mm_per_px,
            records=records,
        ))
    return Dataset(samples=samples, meta={"kind": "deeplesion", "config": asdict(config)})
