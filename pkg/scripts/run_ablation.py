#!/usr/bin/env python3
"""Desk-scale ablation sweep over the working-memory and attention variants.

Trains the full model and its four ablations on the same Group C ratio 1
data and seed, scores U-P and U-C pools, and writes the rows to
experiments/ablation/ablation.tsv for the acceptance suite.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from visuolang.evalkit import ABLATIONS, aggregate, run_condition, write_dsv
from visuolang.harness import write_manifest
from visuolang.learnplan import InferenceBudget, TrainRunConfig

from run_compgen import desk_model, desk_world


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--group", default="C")
    ap.add_argument("--ratio", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=400)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("--samples", type=int, default=3)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent
                                         / "experiments" / "ablation"))
    args = ap.parse_args()

    run = TrainRunConfig(epochs=args.epochs, lr=args.lr)
    budget = InferenceBudget(args.iterations, args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "run_manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    write_manifest(out, "scripts/run_ablation.py "
                        f"--seed {args.seed} --group {args.group} "
                        f"--ratio {args.ratio} --epochs {args.epochs} "
                        f"--lr {args.lr}",
                   config_text=desk_model().to_text(), seeds=[args.seed])

    rows = []
    for name, flags in ABLATIONS.items():
        t0 = time.time()
        print(f"[{name}] training...", flush=True)
        rows.extend(run_condition(args.group, args.ratio, args.seed,
                                  desk_world(), desk_model(), run, budget,
                                  per_combo_train=1, per_combo_test=1,
                                  ablation=flags, condition=name))
        write_dsv(out / "ablation.tsv", rows)
        print(f"[{name}] done in {(time.time() - t0) / 60:.1f} min",
              flush=True)

    for key, (mean, sd, n) in sorted(aggregate(rows).items()):
        print(f"{key}: {mean:.5f} +- {sd:.5f} (n={n})")


if __name__ == "__main__":
    main()
