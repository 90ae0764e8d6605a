#!/usr/bin/env python3
"""Desk-scale compositional-generalization sweep.

Trains the model on the densest and sparsest verb-noun grids (Group A at
ratio 1 and Group D at ratio 1) over several seeds, scores planning error on
unseen positions (U-P) and unseen combinations (U-C), and writes the raw
per-seed metric rows plus pairwise Welch tests under experiments/compgen/.

Runtime is a few hours on one core; results are committed so the acceptance
suite can check the trend without rerunning.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from visuolang.evalkit import (aggregate, pairwise_welch, run_condition,
                               write_dsv, TTEST_HEADER)
from visuolang.harness import write_manifest
from visuolang.learnplan import InferenceBudget, TrainRunConfig
from visuolang.model import ModelConfig
from visuolang.toyworld import WorldConfig


def desk_world():
    return WorldConfig(image_size=12, grid=10, test_grid=8, joints=4,
                       t_base=8, t_jitter=1)


def desk_model():
    return ModelConfig(image_size=12, image_channels=3,
                       conv_channels=(4, 8, 12), lstm_sizes=(24, 12, 12),
                       d_dim=24, z_dim=3, joints=4, head_hidden=48)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,5,10")
    ap.add_argument("--epochs", type=int, default=400)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--cells", default="A:1,D:1")
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("--samples", type=int, default=3)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent
                                         / "experiments" / "compgen"))
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    cells = [(c.split(":")[0], int(c.split(":")[1]))
             for c in args.cells.split(",")]
    run = TrainRunConfig(epochs=args.epochs, lr=args.lr)
    budget = InferenceBudget(args.iterations, args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "run_manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()  # rerun replaces the directory's results
    write_manifest(out, "scripts/run_compgen.py "
                        f"--seeds {args.seeds} --epochs {args.epochs} "
                        f"--lr {args.lr} --cells {args.cells} "
                        f"--iterations {args.iterations} "
                        f"--samples {args.samples}",
                   config_text=desk_model().to_text(), seeds=seeds)

    rows = []
    for group, ratio in cells:
        for seed in seeds:
            t0 = time.time()
            print(f"[{group}{ratio} seed {seed}] training...", flush=True)
            rows.extend(run_condition(group, ratio, seed, desk_world(),
                                      desk_model(), run, budget,
                                      per_combo_train=1, per_combo_test=1))
            write_dsv(out / "metrics.tsv", rows)  # checkpoint progress
            print(f"[{group}{ratio} seed {seed}] done in "
                  f"{(time.time() - t0) / 60:.1f} min", flush=True)

    write_dsv(out / "metrics.tsv", rows)
    comparisons = pairwise_welch(rows, metric="vp_error", split="U-C")
    write_dsv(out / "ttest.tsv", comparisons, header=TTEST_HEADER)
    for key, (mean, sd, n) in sorted(aggregate(rows).items()):
        print(f"{key}: {mean:.5f} +- {sd:.5f} (n={n})")
    for c in comparisons:
        print(c)


if __name__ == "__main__":
    main()
