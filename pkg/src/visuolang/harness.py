"""Command-line front door: dataset generation, training, planning,
language inference, evaluation, PB-space KPCA, t-test reports, and the
ablation sweep. Every command that writes an output directory drops a run
manifest with input digests so results can be regenerated bit-identically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .diffcore import Rng
from .evalkit import (aggregate, evaluate_split, kpca_linear, pairwise_welch,
                      read_dsv, run_ablation, vp_error, write_dsv,
                      TTEST_HEADER)
from .learnplan import (InferenceBudget, TrainRunConfig, infer_language,
                        plan_from_goal, train, unpack_weights)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .propriolang import Vocabulary
from .toyworld import (WorldConfig, build_splits, generate_dataset,
                       load_dataset, load_episode, save_dataset)

MANIFEST_NAME = "run_manifest.json"


# -- configuration ----------------------------------------------------------------------

@dataclass
class FullConfig:
    model: ModelConfig
    run: TrainRunConfig
    budget: InferenceBudget


_RUN_PARSERS = {"epochs": int, "lr": float, "clip": float,
                "seeds": lambda v: tuple(int(x) for x in v.split(",")),
                "batch_strategy": str}
_BUDGET_PARSERS = {"iterations": int, "samples_per_iteration": int}


def load_config(path) -> FullConfig:
    """Flat `key = value` file covering model, training-run, and inference
    budget fields in one namespace; unknown keys are rejected, missing keys
    fall back to the defaults."""
    text = Path(path).read_text() if path else ""
    model_lines, run_kw, budget_kw = [], {}, {}
    model_keys = {f.name for f in fields(ModelConfig)}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in _RUN_PARSERS:
            run_kw[key] = _RUN_PARSERS[key](val)
        elif key in _BUDGET_PARSERS:
            budget_kw[key] = _BUDGET_PARSERS[key](val)
        elif key in model_keys:
            model_lines.append(line)
        else:
            raise ValueError(f"unknown config key: {key!r}")
    return FullConfig(model=ModelConfig.from_text("\n".join(model_lines)),
                      run=TrainRunConfig(**run_kw),
                      budget=InferenceBudget(**budget_kw))


def dump_config(config: FullConfig) -> str:
    lines = [config.model.to_text().rstrip()]
    for name, parsers in (("run", _RUN_PARSERS), ("budget", _BUDGET_PARSERS)):
        section = config.run if name == "run" else config.budget
        for key in parsers:
            v = getattr(section, key)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# -- run manifests ---------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_digest: str
    dataset_digest: str
    seeds: list
    version: str
    created: str


def _digest_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def digest_path(path) -> str:
    """Digest of a file, or of a directory's files in sorted order."""
    path = Path(path)
    if not path.exists():
        return "absent"
    h = hashlib.sha256()
    targets = sorted(p for p in path.rglob("*") if p.is_file()) \
        if path.is_dir() else [path]
    for p in targets:
        h.update(str(p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _version() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unreleased"


def write_manifest(out_dir, command, config_text="", dataset_path=None,
                   seeds=()):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / MANIFEST_NAME
    if target.exists():
        raise FileExistsError(f"{target} already exists; refusing to mix runs "
                              f"in one output directory")
    manifest = RunManifest(
        command=command,
        config_digest=_digest_text(config_text),
        dataset_digest=digest_path(dataset_path) if dataset_path else "none",
        seeds=list(seeds), version=_version(),
        created=datetime.now(timezone.utc).isoformat())
    target.write_text(json.dumps(manifest.__dict__, indent=2) + "\n")
    return manifest


def load_manifest(out_dir) -> RunManifest:
    data = json.loads((Path(out_dir) / MANIFEST_NAME).read_text())
    return RunManifest(**data)


# -- subcommands -----------------------------------------------------------------------

def _world_from_args(args) -> WorldConfig:
    return WorldConfig(image_size=args.image_size, grid=args.grid,
                       test_grid=args.test_grid, joints=args.arm_joints,
                       t_base=args.t_base, t_jitter=args.t_jitter)


def _add_world_flags(p):
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--grid", type=int, default=10)
    p.add_argument("--test-grid", type=int, default=8)
    p.add_argument("--arm-joints", type=int, default=4)
    p.add_argument("--t-base", type=int, default=20)
    p.add_argument("--t-jitter", type=int, default=2)
    p.add_argument("--per-combo-train", type=int, default=3)
    p.add_argument("--per-combo-test", type=int, default=1)


def _budget_from_args(args, default: InferenceBudget) -> InferenceBudget:
    return InferenceBudget(
        iterations=args.iterations or default.iterations,
        samples_per_iteration=(args.samples
                               or default.samples_per_iteration))


def _add_budget_flags(p):
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)


def _load_weights(ckpt_path):
    path = Path(ckpt_path)
    if path.is_dir():
        path = path / "model.ckpt"
    checkpoint = load_checkpoint(path)
    return unpack_weights(checkpoint), checkpoint.config


def cmd_gen_data(args):
    world = _world_from_args(args)
    manifest = build_splits(args.group, args.ratio, args.seed)
    pools = generate_dataset(manifest, world, args.seed,
                             args.per_combo_train, args.per_combo_test)
    save_dataset(args.out, pools)
    write_manifest(args.out, "gen-data", config_text=str(world),
                   dataset_path=None, seeds=[args.seed])
    print(f"wrote {sum(len(v) for v in pools.values())} episodes to "
          f"{args.out}")
    return 0


def cmd_train(args):
    config = load_config(args.config)
    if args.epochs is not None:
        config.run.epochs = args.epochs
    pools = load_dataset(args.data)
    sample = pools["train"][0]
    m = config.model
    if sample.frames.shape[1:] != (m.image_channels, m.image_size,
                                   m.image_size):
        raise ValueError(f"config expects {m.image_channels}x{m.image_size}x"
                         f"{m.image_size} frames but the dataset holds "
                         f"{sample.frames.shape[1:]}")
    if sample.joints.shape[1] != m.joints:
        raise ValueError(f"config expects {m.joints} joints but the dataset "
                         f"holds {sample.joints.shape[1]}")
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    write_manifest(out, "train", config_text=dump_config(config),
                   dataset_path=args.data, seeds=[args.seed])
    checkpoint, trace = train(pools["train"], config.model, config.run,
                              seed=args.seed, resume=resume,
                              trace_path=out / "trace.tsv")
    save_checkpoint(out / "model.ckpt", checkpoint)
    print(f"epoch {trace[-1]['epoch']}: total loss {trace[-1]['total']:.6f}")
    return 0


def cmd_plan(args):
    weights, model_config = _load_weights(args.ckpt)
    episode = load_episode(args.episode)
    vocab = Vocabulary.load()
    goal = vocab.encode_sentence(args.goal.split())
    budget = _budget_from_args(args, InferenceBudget())
    t_len = episode.frames.shape[0] - 1
    result = plan_from_goal(weights, model_config, goal, episode.frames[0],
                            episode.joints[0], t_len, budget, Rng(args.seed))
    err = vp_error(result, episode)
    print(f"goal: {args.goal}")
    print(f"vp_error: visual {err.visual:.6f} proprio {err.proprio:.6f} "
          f"combined {err.combined:.6f}")
    if args.out:
        out = Path(args.out)
        write_manifest(out, "plan", config_text=model_config.to_text(),
                       dataset_path=args.episode, seeds=[args.seed])
        np.savez(out / "plan.npz", frames=result.frames,
                 joints=result.joints, sentence=result.sentence,
                 pb=result.pb, trace=np.asarray(result.trace))
    return 0


def cmd_infer_lang(args):
    weights, model_config = _load_weights(args.ckpt)
    episode = load_episode(args.episode)
    budget = _budget_from_args(args, InferenceBudget())
    result = infer_language(weights, model_config, episode.frames,
                            episode.joints, budget, Rng(args.seed))
    vocab = Vocabulary.load()
    words = vocab.decode_sentence(result.sentence)
    print(" ".join(words))
    if args.out:
        out = Path(args.out)
        write_manifest(out, "infer-lang", config_text=model_config.to_text(),
                       dataset_path=args.episode, seeds=[args.seed])
        (out / "sentence.txt").write_text(" ".join(words) + "\n")
    return 0


def cmd_eval(args):
    weights, model_config = _load_weights(args.ckpt)
    pools = load_dataset(args.data)
    budget = _budget_from_args(args, InferenceBudget())
    out = Path(args.out)
    write_manifest(out, "eval", config_text=model_config.to_text(),
                   dataset_path=args.data, seeds=[args.seed])
    rows = []
    for key, (split, pool) in enumerate((("U-P", pools.get("up", [])),
                                         ("U-C", pools.get("uc", [])))):
        if not pool:
            continue
        errors, success = evaluate_split(weights, model_config, pool, budget,
                                         Rng(args.seed).spawn(key + 1))
        for metric, values in (("visual", [e.visual for e in errors]),
                               ("proprio", [e.proprio for e in errors]),
                               ("vp_error", [e.combined for e in errors])):
            rows.append({"condition": args.condition, "seed": args.seed,
                         "split": split, "metric": metric,
                         "value": float(np.mean(values))})
        rows.append({"condition": args.condition, "seed": args.seed,
                     "split": split, "metric": "language_success",
                     "value": success})
    write_dsv(out / "metrics.tsv", rows)
    for (cond, split, metric), (mean, sd, n) in sorted(aggregate(rows).items()):
        print(f"{cond}\t{split}\t{metric}\t{mean:.6f} +- {sd:.6f} (n={n})")
    return 0


def cmd_kpca(args):
    checkpoint = load_checkpoint(Path(args.ckpt) / "model.ckpt"
                                 if Path(args.ckpt).is_dir() else args.ckpt)
    pb_raw = sorted((k, v) for k, v in checkpoint.tensors.items()
                    if k.startswith("pb."))
    if len(pb_raw) < 3:
        raise ValueError("checkpoint holds fewer than 3 sequence biases")
    pbs = np.tanh(np.stack([v for _, v in pb_raw]))
    emb = kpca_linear(pbs)
    out = Path(args.out)
    write_manifest(out, "kpca", config_text=checkpoint.config.to_text())
    lines = ["index\tpc1\tpc2"]
    lines += [f"{i}\t{c[0]!r}\t{c[1]!r}" for i, c in enumerate(emb.coords)]
    (out / "kpca.tsv").write_text("\n".join(lines) + "\n")
    print(f"explained variance: {emb.explained_variance_ratio[0]:.4f} "
          f"{emb.explained_variance_ratio[1]:.4f}")
    return 0


def cmd_ttest(args):
    rows = read_dsv(args.table)
    comparisons = pairwise_welch(rows, metric=args.metric, split=args.split)
    print("\t".join(TTEST_HEADER))
    for c in comparisons:
        print(f"{c['group_1']}\t{c['group_2']}\t{c['t_statistic']:.6f}\t"
              f"{c['p_value']:.6g}\t{c['degrees_of_freedom']:.3f}")
    if args.out:
        out = Path(args.out)
        write_manifest(out, "ttest", dataset_path=args.table)
        write_dsv(out / "ttest.tsv", comparisons, header=TTEST_HEADER)
    return 0


def cmd_ablate(args):
    config = load_config(args.config)
    if args.epochs is not None:
        config.run.epochs = args.epochs
    world = _world_from_args(args)
    budget = _budget_from_args(args, config.budget)
    out = Path(args.out)
    write_manifest(out, "ablate", config_text=dump_config(config),
                   seeds=[args.seed])
    rows = run_ablation(args.group, args.ratio, args.seed, world,
                        config.model, config.run, budget,
                        args.per_combo_train, args.per_combo_test)
    write_dsv(out / "ablation.tsv", rows)
    for (cond, split, metric), (mean, _, _) in sorted(aggregate(rows).items()):
        if metric == "visual" and split == "U-P":
            print(f"{cond}\tU-P visual\t{mean:.6f}")
    return 0


# -- argument wiring ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="visuolang",
        description="tabletop language-conditioned prediction: data, "
                    "training, planning, and analysis")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset for one split")
    p.add_argument("--group", required=True, choices=list("ABCD"))
    p.add_argument("--ratio", required=True, type=int, choices=[1, 2, 3])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_world_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("plan", help="plan actions from a sentence goal")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--goal", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_budget_flags(p)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("infer-lang", help="infer the sentence behind an "
                                          "observed episode")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_budget_flags(p)
    p.set_defaults(fn=cmd_infer_lang)

    p = sub.add_parser("eval", help="score a checkpoint on U-P and U-C pools")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--condition", default="model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_budget_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("kpca", help="project trained sequence biases to 2-D")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_kpca)

    p = sub.add_parser("ttest", help="pairwise Welch tests over a metrics "
                                     "table")
    p.add_argument("--table", required=True)
    p.add_argument("--metric", default="vp_error")
    p.add_argument("--split", default="U-C")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ttest)

    p = sub.add_parser("ablate", help="train and score ablation variants")
    p.add_argument("--group", default="D")
    p.add_argument("--ratio", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_world_flags(p)
    _add_budget_flags(p)
    p.set_defaults(fn=cmd_ablate)
    return parser


def cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli(sys.argv[1:]))
