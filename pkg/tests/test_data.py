import filecmp
from pathlib import Path

import numpy as np
import pytest

from seenet import data as sd
from seenet import geometry as geo
from seenet.errors import MalformedRow, MissingFile, SpecInfeasible


SMALL_SPEC = sd.PhantomSpec(image_size=(96, 96), lesion_count=(1, 2),
                            radius_range=(6.0, 14.0))


def _dice(a, b):
    a, b = a > 0, b > 0
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2.0 * (a & b).sum() / s


# ---------------------------------------------------------------------------
# generate_phantoms


def test_generate_deterministic_byte_identical(tmp_path):
    d1 = sd.generate_phantoms(SMALL_SPEC, 6, seed=11)
    d2 = sd.generate_phantoms(SMALL_SPEC, 6, seed=11)
    p1 = sd.save_dataset(d1, tmp_path / "a")
    p2 = sd.save_dataset(d2, tmp_path / "b")
    files1 = sorted(f.relative_to(p1) for f in p1.rglob("*") if f.is_file())
    files2 = sorted(f.relative_to(p2) for f in p2.rglob("*") if f.is_file())
    assert files1 == files2
    for f in files1:
        assert filecmp.cmp(p1 / f, p2 / f, shallow=False), f


def test_generate_long_not_shorter_than_short():
    ds = sd.generate_phantoms(SMALL_SPEC, 12, seed=3)
    n = 0
    for s in ds.samples:
        for r in s.records:
            m = r.recist()
            assert m.long_px >= m.short_px
            n += 1
    assert n >= 12


def test_generate_masks_self_consistent_with_recist():
    ds = sd.generate_phantoms(SMALL_SPEC, 8, seed=5)
    for s in ds.samples:
        for r, mask in zip(s.records, s.masks):
            m = geo.recist_from_mask(mask, s.spacing_mm_per_px)
            np.testing.assert_array_equal(m.endpoints(), np.array(r.coords).reshape(4, 2))


def test_generate_quadrilateral_summarizes_mask():
    spec = sd.PhantomSpec(image_size=(112, 112), lesion_count=(1, 2))
    ds = sd.generate_phantoms(spec, 80, seed=7)
    dices = []
    for s in ds.samples:
        for r, mask in zip(s.records, s.masks):
            quad = sd.recist_quadrilateral_mask(r.recist(), mask.shape)
            dices.append(_dice(quad, mask))
            if len(dices) == 100:
                break
    assert len(dices) >= 100
    assert float(np.mean(dices)) >= 0.5


def test_generate_lesions_disjoint_and_boxes_valid():
    ds = sd.generate_phantoms(SMALL_SPEC, 10, seed=9)
    for s in ds.samples:
        total = np.zeros(s.image.shape, bool)
        for r, mask in zip(s.records, s.masks):
            assert not (total & mask).any()
            total |= mask
            r.validate()


def test_generate_infeasible_spec():
    bad = sd.PhantomSpec(image_size=(48, 48), lesion_count=(3, 3),
                         radius_range=(20.0, 22.0))
    with pytest.raises(SpecInfeasible):
        sd.generate_phantoms(bad, 1, seed=0)


def test_generate_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        sd.generate_phantoms(SMALL_SPEC, 0, seed=0)


# ---------------------------------------------------------------------------
# save / load round trip


def test_save_load_round_trip(tmp_path):
    ds = sd.generate_phantoms(SMALL_SPEC, 4, seed=21)
    out = sd.save_dataset(ds, tmp_path / "ds")
    back = sd.load_dataset(out)
    assert len(back) == len(ds)
    a = {s.slice_id: s for s in ds.samples}
    for s in back.samples:
        orig = a[s.slice_id]
        assert np.abs(s.image - orig.image).max() < 0.01  # 16-bit quantization
        assert len(s.records) == len(orig.records)
        for rb, ro in zip(s.records, orig.records):
            assert rb.coords == ro.coords
            assert rb.box == ro.box
            assert rb.patient_id == ro.patient_id
        for mb, mo in zip(s.masks, orig.masks):
            assert (mb == mo).all()


def test_load_missing_dir(tmp_path):
    with pytest.raises(MissingFile):
        sd.load_dataset(tmp_path / "nope")


# ---------------------------------------------------------------------------
# splits


def test_split_is_pure_function_of_patient_and_seed():
    assert sd.assign_split("P1", 0) == sd.assign_split("P1", 0)
    labels = {sd.assign_split(f"P{i}", 0) for i in range(200)}
    assert labels == {"train", "val"}
    frac_val = np.mean([sd.assign_split(f"P{i}", 0) == "val" for i in range(2000)])
    assert 0.05 < frac_val < 0.15


def test_splits_patient_disjoint():
    ds = sd.generate_phantoms(SMALL_SPEC, 40, seed=2)
    seen: dict[str, str] = {}
    for s in ds.samples:
        for r in s.records:
            if r.patient_id in seen:
                assert seen[r.patient_id] == r.split
            seen[r.patient_id] = r.split


# ---------------------------------------------------------------------------
# windowing + external CSV ingestion


def test_apply_window_linear_map_center():
    raw = np.array([[40.0, -160.0, 240.0, -500.0, 10000.0]])
    out = sd.apply_window(raw, center=40.0, width=400.0)
    assert out[0, 0] == pytest.approx(127.5)
    assert out[0, 1] == pytest.approx(0.0)
    assert out[0, 2] == pytest.approx(255.0)
    assert out[0, 3] == 0.0
    assert out[0, 4] == 255.0


def _write_external(tmp_path, rows):
    import csv as _csv

    img_dir = tmp_path / "imgs"
    img_dir.mkdir(exist_ok=True)
    raw = np.full((64, 64), 32768 + 40, dtype=np.uint16)  # center of window
    from PIL import Image

    Image.fromarray(raw).save(img_dir / "s1.png")
    csv_path = tmp_path / "ann.csv"
    cols = ["image", "patient_id", "study_id", "series_id",
            "spacing_mm_per_px", "measurement_coordinates", "bounding_box"]
    with csv_path.open("w", newline="") as fh:
        w = _csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    return csv_path, img_dir


GOOD_ROW = {
    "image": "s1.png", "patient_id": "PA", "study_id": "S", "series_id": "1",
    "spacing_mm_per_px": "0.8",
    "measurement_coordinates": "10,30,50,30,30,20,30,40",
    "bounding_box": "8,18,52,42",
}


def test_load_external_good_row(tmp_path):
    csv_path, img_dir = _write_external(tmp_path, [GOOD_ROW])
    ds = sd.load_deeplesion(csv_path, img_dir)
    assert len(ds) == 1
    s = ds.samples[0]
    assert s.image[0, 0] == pytest.approx(127.5)  # windowing hits mid-scale
    assert s.records[0].split in ("train", "val")
    m = s.records[0].recist()
    assert m.long_px == pytest.approx(40.0)


def test_load_external_seven_coordinates_is_malformed(tmp_path):
    bad = dict(GOOD_ROW)
    bad["measurement_coordinates"] = "10,30,50,30,30,20,30"
    csv_path, img_dir = _write_external(tmp_path, [GOOD_ROW, bad])
    with pytest.raises(MalformedRow) as ei:
        sd.load_deeplesion(csv_path, img_dir)
    assert ei.value.row == 3


def test_load_external_invariant_violation_skipped_with_warning(tmp_path, caplog):
    bad = dict(GOOD_ROW)
    bad["bounding_box"] = "20,18,52,42"  # box no longer contains the long axis
    csv_path, img_dir = _write_external(tmp_path, [GOOD_ROW, bad])
    with caplog.at_level("WARNING"):
        ds = sd.load_deeplesion(csv_path, img_dir)
    assert len(ds.samples[0].records) == 1
    assert any("skipping row 3" in r.message for r in caplog.records)


def test_load_external_missing_csv(tmp_path):
    with pytest.raises(MissingFile):
        sd.load_deeplesion(tmp_path / "none.csv", tmp_path)
