"""HTTP measurement service: slices in, click-to-measurement out.

JSON coordinates are image pixels, (x = column, y = row), origin top-left.
The models are loaded once at startup and held read-only; inference is
serialized behind a lock so concurrent requests stay correct.
"""

from __future__ import annotations

import base64
import io
import logging
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .data import Dataset, load_dataset
from .errors import NoCandidate
from .geometry import Point2, RecistMeasurement, contour_area, mask_to_contour
from .nets import load_checkpoint
from .pipeline import TrainConfig, measure

log = logging.getLogger(__name__)


class ClickIn(BaseModel):
    x: float
    y: float


class MeasureIn(BaseModel):
    slice_id: str
    click: ClickIn


def _largest_contour(mask: np.ndarray) -> list[list[float]]:
    loops = mask_to_contour(mask)
    if not loops:
        return []
    best = max(loops, key=contour_area)
    return [[float(x), float(y)] for x, y in best]


def _recist_json(m: RecistMeasurement) -> dict:
    def pt(p):
        return {"x": p.x, "y": p.y}

    return {
        "recist": {
            "long": [pt(m.long_a), pt(m.long_b)],
            "short": [pt(m.short_a), pt(m.short_b)],
        },
        "lengths_mm": {"long": m.long_mm, "short": m.short_mm},
    }


def measurement_payload(result) -> dict:
    """Shared JSON schema for the service and the CLI measure command."""
    out = {
        "contour": _largest_contour(result.mask),
        **_recist_json(result.recist),
        "initial": {
            "contour": _largest_contour(result.initial_mask),
            **_recist_json(result.initial_recist),
        },
        "candidate": {"score": result.candidate_score,
                      "box": list(result.candidate_box)},
        "timing_ms": result.timing_ms,
    }
    return out


def create_app(dataset_dir=None, stage1_ckpt=None, stage2_ckpt=None,
               cfg: TrainConfig | None = None, static_dir=None) -> FastAPI:
    app = FastAPI(title="seenet measurement service")
    cfg = cfg or TrainConfig()
    state = {"dataset": None, "detector": None, "refiner": None}
    lock = threading.Lock()

    if dataset_dir is not None:
        state["dataset"] = load_dataset(dataset_dir)
    if stage1_ckpt is not None and stage2_ckpt is not None:
        state["detector"], _ = load_checkpoint(stage1_ckpt)
        state["refiner"], _ = load_checkpoint(stage2_ckpt)

    def _sample(slice_id):
        ds: Dataset = state["dataset"]
        if ds is None:
            return None
        for s in ds.samples:
            if s.slice_id == slice_id:
                return s
        return None

    @app.get("/api/slices")
    def list_slices():
        ds: Dataset = state["dataset"]
        if ds is None:
            return JSONResponse(status_code=503, content={"error": "NoDataset"})
        return [
            {
                "id": s.slice_id,
                "height": int(s.image.shape[0]),
                "width": int(s.image.shape[1]),
                "spacing_mm_per_px": s.spacing_mm_per_px,
            }
            for s in ds.samples
        ]

    @app.get("/api/slices/{slice_id}")
    def get_slice(slice_id: str):
        s = _sample(slice_id)
        if s is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSlice"})
        img8 = np.clip(np.rint(s.image), 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(img8).save(buf, format="PNG")
        return {
            "id": s.slice_id,
            "height": int(img8.shape[0]),
            "width": int(img8.shape[1]),
            "spacing_mm_per_px": s.spacing_mm_per_px,
            "image_png_base64": base64.b64encode(buf.getvalue()).decode(),
        }

    @app.post("/api/measure")
    def post_measure(req: MeasureIn):
        if state["detector"] is None or state["refiner"] is None:
            return JSONResponse(status_code=503, content={"error": "ModelsNotLoaded"})
        s = _sample(req.slice_id)
        if s is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSlice"})
        h, w = s.image.shape
        if not (0 <= req.click.x < w and 0 <= req.click.y < h):
            return JSONResponse(status_code=422, content={"error": "OutOfBounds"})
        click = Point2(req.click.x, req.click.y)
        with lock:
            try:
                result = measure(s.image, s.spacing_mm_per_px, click,
                                 state["detector"], state["refiner"], cfg)
            except NoCandidate:
                return JSONResponse(status_code=422, content={"error": "NoCandidate"})
        return measurement_payload(result)

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def serve(dataset_dir, stage1_ckpt, stage2_ckpt, host="127.0.0.1", port=8008,
          cfg: TrainConfig | None = None, static_dir=None):
    import uvicorn

    app = create_app(dataset_dir, stage1_ckpt, stage2_ckpt, cfg, static_dir)
    uvicorn.run(app, host=host, port=port)
