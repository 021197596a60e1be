#!/usr/bin/env python3
"""Run the phantom acceptance benchmark and store per-run metric artifacts.

The benchmark trains every architecture variant needed by the acceptance
suite on a fixed 24-subject phantom dataset:

* ordering study: cnn, rnn_plain, rnn_circle, resrnn_circle; 5-fold CV,
  7500 iterations per fold, 3 training seeds (60 runs);
* first-frame study: temporal-recurrence-only plain vs circle on one fixed
  train/test split, 3 seeds (6 runs).

Each completed run writes one JSON file under the output directory, so the
script is resumable: re-running skips runs whose artifacts already exist.
CPU time per run is recorded so the total compute cost can be audited.

Usage: python scripts/acceptance_benchmark.py [outdir]
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from resrnn import model, phantom, training

DATASET_SEED = 7
DATASET_SIZE = 24
SEEDS = (0, 1, 2)
ORDERING_VARIANTS = ("resrnn_circle", "cnn", "rnn_circle", "rnn_plain")
FIRST_FRAME_VARIANTS = ("rnn_circle", "rnn_plain")
DEFAULT_OUTDIR = Path(__file__).resolve().parent.parent / "results" / "acceptance"


def run_one(dataset, folds, variant, seed, fold, use_spatial, outdir: Path, tag: str):
    name = f"{tag}_{variant}_s{seed}_f{fold}.json"
    path = outdir / name
    if path.exists():
        return
    cfg = model.ResRNNConfig(variant=variant, use_spatial=use_spatial)
    # same per-fold seed derivation as training.run_cv
    tcfg = training.TrainConfig(seed=seed * 1009 + fold, log_every=500)
    test_idx = folds[fold]
    test_set = set(test_idx)
    train_split = [s for i, s in enumerate(dataset) if i not in test_set]
    test_split = [dataset[i] for i in test_idx]
    t_cpu = time.process_time()
    t_wall = time.time()
    params, curve = training.train(train_split, cfg, tcfg)
    report = training.evaluate(params, cfg, test_split)
    record = {
        "variant": variant,
        "use_spatial": use_spatial,
        "seed": seed,
        "fold": fold,
        "dataset_seed": DATASET_SEED,
        "dataset_size": DATASET_SIZE,
        "iterations": tcfg.max_iters,
        "test_subjects": [s.subject_id for s in test_split],
        "overall_mae": report.overall_mae(),
        "frame1_mae": report.frame1_mae(),
        "frame_curve": report.frame_curve().tolist(),
        "region_rows": report.region_rows(),
        "final_loss": curve[-1][1],
        "cpu_seconds": time.process_time() - t_cpu,
        "wall_seconds": time.time() - t_wall,
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, indent=1))
    tmp.rename(path)
    print(f"done {name}: mae={record['overall_mae']:.5f} "
          f"frame1={record['frame1_mae']:.5f} cpu={record['cpu_seconds']:.0f}s",
          flush=True)


def main() -> int:
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_OUTDIR
    outdir.mkdir(parents=True, exist_ok=True)
    dataset = phantom.generate_dataset(DATASET_SIZE, seed=DATASET_SEED)
    folds = training.five_fold(dataset, seed=DATASET_SEED)
    (outdir / "folds.json").write_text(json.dumps(
        {"dataset_seed": DATASET_SEED, "folds": [list(f) for f in folds]}, indent=1))

    # first-frame study first: fewest runs, gives a complete criterion early
    for seed in SEEDS:
        for variant in FIRST_FRAME_VARIANTS:
            run_one(dataset, folds, variant, seed, fold=0,
                    use_spatial=False, outdir=outdir, tag="firstframe")
    # ordering study, seed-major so each seed's full table completes in turn
    for seed in SEEDS:
        for fold in range(len(folds)):
            for variant in ORDERING_VARIANTS:
                run_one(dataset, folds, variant, seed, fold,
                        use_spatial=True, outdir=outdir, tag="ordering")
    print("benchmark complete", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
