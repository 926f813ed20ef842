#!/usr/bin/env python3
"""Tiny end-to-end demo: generate phantoms, train small models, start the
measurement service (with the browser UI if frontend/dist exists).

    python scripts/quickstart_demo.py --out runs/demo --port 8008

Training takes a few minutes on a laptop; quality is smoke-level. Use
scripts/run_phantom_experiment.py for the full benchmark.
"""

import argparse
import logging
from pathlib import Path

from seenet import data as sd
from seenet import pipeline as pl
from seenet.service import serve


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--port", type=int, default=8008)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--width-factor", type=float, default=0.15)
    ap.add_argument("--no-serve", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    data_dir = out / "data"
    cfg = pl.TrainConfig(seed=1, width_factor=args.width_factor,
                         stage1_epochs=3, stage2_epochs=2,
                         stage1_batch=4, stage2_batch=4)

    if not (data_dir / "meta.yaml").exists():
        ds = sd.generate_phantoms(sd.PhantomSpec(), args.n, seed=1)
        sd.save_dataset(ds, data_dir)
    ds = sd.load_dataset(data_dir)

    ck1 = out / "stage1.ckpt"
    ck2 = out / "stage2.ckpt"
    if not ck1.exists():
        pseudo = pl.build_pseudo_labels(ds)
        ck1 = pl.train_stage1(ds, cfg, out, pseudo_labels=pseudo)
        ck2 = pl.train_stage2(ds, ck1, cfg, out, pseudo_labels=pseudo,
                              loi_per_sample=1)
    pl.write_manifest(out, cfg, extra={"command": "quickstart_demo"})

    if args.no_serve:
        print(f"checkpoints ready under {out}")
        return
    static = Path("frontend/dist")
    serve(data_dir, ck1, ck2, host=args.host, port=args.port, cfg=cfg,
          static_dir=static if static.is_dir() else None)


if __name__ == "__main__":
    main()
