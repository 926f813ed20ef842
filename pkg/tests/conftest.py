"""Session fixtures: a mini phantom dataset and quickly trained checkpoints
shared by the service / CLI tests."""

import numpy as np
import pytest

from seenet import data as sd
from seenet import geometry as geo
from seenet import pipeline as pl
from seenet.errors import NoCandidate
from seenet.nets import load_checkpoint


MINI_SPEC = sd.PhantomSpec(image_size=(96, 96), lesion_count=(1, 2),
                           radius_range=(9.0, 16.0))
MINI_CFG = pl.TrainConfig(seed=3, width_factor=0.1, stage1_epochs=2,
                          stage2_epochs=3, stage1_batch=4, stage2_batch=4,
                          click_dropout=0.3)


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    """Train tiny stage-1/stage-2 nets on a few phantoms; returns paths plus
    a (slice_id, click) pair that measures successfully."""
    root = tmp_path_factory.mktemp("mini")
    data_dir = sd.save_dataset(sd.generate_phantoms(MINI_SPEC, 24, seed=31),
                               root / "data")
    # reload so fixtures hold exactly what the service will serve
    ds = sd.load_dataset(data_dir)
    pseudo = pl.build_pseudo_labels(ds)
    ck1 = pl.train_stage1(ds, MINI_CFG, root / "run", pseudo_labels=pseudo)
    ck2 = pl.train_stage2(ds, ck1, MINI_CFG, root / "run", pseudo_labels=pseudo,
                          max_steps=24)
    detector, _ = load_checkpoint(ck1)
    refiner, _ = load_checkpoint(ck2)

    good = None
    for s in ds.samples:
        click = geo.mask_centroid(s.masks[0])
        try:
            pl.measure(s.image, s.spacing_mm_per_px, click, detector, refiner,
                       MINI_CFG)
        except NoCandidate:
            continue
        good = (s.slice_id, click)
        break
    if good is None:
        pytest.skip("mini training produced no measurable slice")
    return {
        "dataset": ds,
        "data_dir": data_dir,
        "run_dir": root / "run",
        "ckpt1": ck1,
        "ckpt2": ck2,
        "detector": detector,
        "refiner": refiner,
        "slice_id": good[0],
        "click": good[1],
        "cfg": MINI_CFG,
    }
