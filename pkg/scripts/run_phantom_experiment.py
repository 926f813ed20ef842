#!/usr/bin/env python3
"""Run the phantom benchmark end to end and print the aggregate metrics.

Examples:
    python scripts/run_phantom_experiment.py --out runs/bench
    python scripts/run_phantom_experiment.py --out runs/quick \
        --n-train 300 --n-test 50 --width-factor 0.15 --stage2-epochs 2
"""

import argparse
import dataclasses
import json
import logging

from seenet.experiment import PhantomBenchmarkConfig, run_phantom_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="run directory")
    ap.add_argument("--n-train", type=int, default=None)
    ap.add_argument("--n-test", type=int, default=None)
    ap.add_argument("--width-factor", type=float, default=None)
    ap.add_argument("--stage1-epochs", type=int, default=None)
    ap.add_argument("--stage2-epochs", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--fresh", action="store_true",
                    help="ignore checkpoints already present in --out")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    bench = PhantomBenchmarkConfig()
    train = bench.train
    for name in ("width_factor", "stage1_epochs", "stage2_epochs", "seed"):
        v = getattr(args, name)
        if v is not None:
            train = dataclasses.replace(train, **{name: v})
    updates = {"train": train}
    if args.n_train is not None:
        updates["n_train"] = args.n_train
    if args.n_test is not None:
        updates["n_test"] = args.n_test
    bench = dataclasses.replace(bench, **updates)

    metrics = run_phantom_benchmark(args.out, bench,
                                    reuse_checkpoints=not args.fresh)
    print(json.dumps(metrics, indent=2))


if __name__ == "__main__":
    main()
