import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from seenet import pipeline as pl
from seenet.geometry import Point2
from seenet.service import create_app


@pytest.fixture(scope="module")
def client(mini_run):
    app = create_app(dataset_dir=mini_run["data_dir"], stage1_ckpt=mini_run["ckpt1"],
                     stage2_ckpt=mini_run["ckpt2"], cfg=mini_run["cfg"])
    return TestClient(app)


def test_list_slices(client, mini_run):
    r = client.get("/api/slices")
    assert r.status_code == 200
    items = r.json()
    assert len(items) == len(mini_run["dataset"].samples)
    entry = items[0]
    assert set(entry) == {"id", "height", "width", "spacing_mm_per_px"}
    assert entry["height"] == 96


def test_get_slice_image_decodes(client, mini_run):
    sid = mini_run["slice_id"]
    r = client.get(f"/api/slices/{sid}")
    assert r.status_code == 200
    body = r.json()
    raw = base64.b64decode(body["image_png_base64"])
    img = np.asarray(Image.open(io.BytesIO(raw)))
    assert img.shape == (96, 96)
    assert img.dtype == np.uint8


def test_get_slice_unknown_404(client):
    r = client.get("/api/slices/nope")
    assert r.status_code == 404
    assert r.json() == {"error": "UnknownSlice"}


def test_measure_out_of_bounds_422(client, mini_run):
    r = client.post("/api/measure", json={
        "slice_id": mini_run["slice_id"], "click": {"x": 1000, "y": 5}})
    assert r.status_code == 422
    assert r.json() == {"error": "OutOfBounds"}
    r = client.post("/api/measure", json={
        "slice_id": mini_run["slice_id"], "click": {"x": -1, "y": 5}})
    assert r.status_code == 422


def test_measure_unknown_slice_404(client):
    r = client.post("/api/measure", json={"slice_id": "nope", "click": {"x": 5, "y": 5}})
    assert r.status_code == 404


def test_measure_matches_pipeline_bit_for_bit(client, mini_run):
    sid, click = mini_run["slice_id"], mini_run["click"]
    r = client.post("/api/measure", json={"slice_id": sid,
                                          "click": {"x": click.x, "y": click.y}})
    assert r.status_code == 200
    body = r.json()
    sample = next(s for s in mini_run["dataset"].samples if s.slice_id == sid)
    res = pl.measure(sample.image, sample.spacing_mm_per_px,
                     Point2(click.x, click.y), mini_run["detector"],
                     mini_run["refiner"], mini_run["cfg"])
    assert body["lengths_mm"]["long"] == res.recist.long_mm
    assert body["lengths_mm"]["short"] == res.recist.short_mm
    assert body["recist"]["long"][0]["x"] == res.recist.long_a.x
    assert body["initial"]["lengths_mm"]["long"] == res.initial_recist.long_mm
    # contour is present exactly when the corresponding mask is non-empty
    assert (len(body["contour"]) > 0) == bool(res.mask.any())
    assert (len(body["initial"]["contour"]) > 0) == bool(res.initial_mask.any())
    assert "timing_ms" in body


def test_measure_deterministic_repeat(client, mini_run):
    sid, click = mini_run["slice_id"], mini_run["click"]
    payload = {"slice_id": sid, "click": {"x": click.x, "y": click.y}}
    r1 = client.post("/api/measure", json=payload).json()
    r2 = client.post("/api/measure", json=payload).json()
    r1.pop("timing_ms")
    r2.pop("timing_ms")
    assert r1 == r2


def test_models_not_loaded_503(mini_run):
    app = create_app(dataset_dir=mini_run["data_dir"])
    c = TestClient(app)
    r = c.post("/api/measure", json={"slice_id": mini_run["slice_id"],
                                     "click": {"x": 5, "y": 5}})
    assert r.status_code == 503
    assert r.json() == {"error": "ModelsNotLoaded"}


def test_concurrent_requests_consistent(client, mini_run):
    import concurrent.futures

    sid, click = mini_run["slice_id"], mini_run["click"]
    payload = {"slice_id": sid, "click": {"x": click.x, "y": click.y}}

    def hit(_):
        return client.post("/api/measure", json=payload).json()["lengths_mm"]["long"]

    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as ex:
        vals = list(ex.map(hit, range(6)))
    assert len(set(vals)) == 1
