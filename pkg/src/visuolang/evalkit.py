"""Metrics and experiment drivers: visuo-proprioceptive error, sentence
success rate, linear-kernel PCA of the binding space, Welch's t-test with a
numerically integrated Student-t CDF, and the group/ratio/seed sweep that
aggregates per-condition tables with pairwise significance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Rng
from .learnplan import infer_language, plan_from_goal, train, unpack_weights
from .model import apply_ablation
from .toyworld import build_splits, generate_dataset

DSV_HEADER = ("condition", "seed", "split", "metric", "value")
TTEST_HEADER = ("group_1", "group_2", "t_statistic", "p_value",
                "degrees_of_freedom")

ABLATIONS = {
    "full": (),
    "no-vwm1": ("no-vwm1",),
    "no-vwm2": ("no-vwm2",),
    "no-attention": ("no-attention",),
    "no-vwm-no-attention": ("no-vwm1", "no-vwm2", "no-attention"),
}


@dataclass
class VpError:
    visual: float    # mean per-pixel squared error over the sequence
    proprio: float   # mean squared decoded-joint error
    combined: float  # unweighted mean of the two


@dataclass
class TTestResult:
    t_statistic: float
    p_value: float
    degrees_of_freedom: float


@dataclass
class KpcaEmbedding:
    coords: np.ndarray                 # [n, 2]
    explained_variance_ratio: np.ndarray  # [2], nonincreasing, in [0, 1]


# -- sequence metrics --------------------------------------------------------------

def vp_error(plan, truth) -> VpError:
    """Predictions start one step after the initial observation, so the
    truth arrays drop their t=0 entry before truncating to the shorter of
    the two sequences."""
    p_frames = np.asarray(plan.frames)
    p_joints = np.asarray(plan.joints)
    t_frames = np.asarray(truth.frames)[1:]
    t_joints = np.asarray(truth.joints)[1:]
    n = min(p_frames.shape[0], t_frames.shape[0])
    if n == 0:
        raise ValueError("no overlapping steps to compare")
    visual = float(np.mean((p_frames[:n] - t_frames[:n]) ** 2))
    proprio = float(np.mean((p_joints[:n] - t_joints[:n]) ** 2))
    return VpError(visual=visual, proprio=proprio,
                   combined=0.5 * (visual + proprio))


def language_success_rate(inferred, targets) -> float:
    """Fraction of sentences whose argmax token matches the target at every
    real position; partial credit is not given. Targets are one-hot rows
    zero-padded after the terminator, and decoding stops at the terminator,
    so padding rows do not take part in the comparison."""
    inferred = list(inferred)
    targets = list(targets)
    if not inferred or len(inferred) != len(targets):
        raise ValueError("need equal-length nonempty sentence batches")
    hits = 0
    for soft, onehot in zip(inferred, targets):
        soft, onehot = np.asarray(soft), np.asarray(onehot)
        if soft.shape != onehot.shape:
            raise ValueError(f"sentence shape mismatch {soft.shape} vs "
                             f"{onehot.shape}")
        real = onehot.any(axis=-1)
        if not real.any():
            raise ValueError("target sentence is all padding")
        hits += int(np.array_equal(soft.argmax(axis=-1)[real],
                                   onehot.argmax(axis=-1)[real]))
    return hits / len(inferred)


# -- KPCA ----------------------------------------------------------------------------

def kpca_linear(pb_set) -> KpcaEmbedding:
    """Top-2 projection from the centered linear-kernel Gram matrix."""
    x = np.asarray(pb_set, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need at least 3 vectors, shape [n, dim]")
    xc = x - x.mean(axis=0)
    gram = xc @ xc.T
    eigval, eigvec = np.linalg.eigh(gram)
    eigval, eigvec = eigval[::-1], eigvec[:, ::-1]
    eigval = np.clip(eigval, 0.0, None)
    total = eigval.sum()
    tol = max(eigval[0], 1.0) * 1e-12
    coords = np.zeros((x.shape[0], 2))
    ratio = np.zeros(2)
    for k in range(2):
        if eigval[k] > tol:
            coords[:, k] = eigvec[:, k] * np.sqrt(eigval[k])
            ratio[k] = eigval[k] / total
    return KpcaEmbedding(coords=coords, explained_variance_ratio=ratio)


def cluster_means(coords, labels):
    """Mean embedding per label (e.g. per verb-noun combination)."""
    coords = np.asarray(coords)
    out = {}
    for lab in sorted(set(labels)):
        mask = np.array([l == lab for l in labels])
        out[lab] = coords[mask].mean(axis=0)
    return out


# -- Welch's t-test ---------------------------------------------------------------------

def _student_t_tail(x, df):
    """P(T > x) for x >= 0, by Gauss-Legendre integration of the density
    over [0, x]; no statistics library involved."""
    if x == 0.0:
        return 0.5
    nodes, weights = np.polynomial.legendre.leggauss(256)
    t = 0.5 * (nodes + 1.0) * x
    log_c = (math.lgamma((df + 1.0) / 2.0) - math.lgamma(df / 2.0)
             - 0.5 * math.log(df * math.pi))
    density = np.exp(log_c - (df + 1.0) / 2.0 * np.log1p(t * t / df))
    integral = 0.5 * x * float(weights @ density)
    return max(0.5 - integral, 0.0)


def welch_t(sample_a, sample_b) -> TTestResult:
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    se2 = va / na + vb / nb
    if se2 == 0.0:
        if a.mean() == b.mean():
            return TTestResult(0.0, 1.0, float(na + nb - 2))
        return TTestResult(math.copysign(math.inf, a.mean() - b.mean()),
                           0.0, float(na + nb - 2))
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    p = 2.0 * _student_t_tail(abs(t), df)
    return TTestResult(float(t), float(min(p, 1.0)), float(df))


# -- experiment driver -----------------------------------------------------------------

def evaluate_split(weights, config, episodes, budget, rng):
    """Planning error and language-inference success on one episode pool."""
    errors, inferred = [], []
    for i, ep in enumerate(episodes):
        t_len = ep.frames.shape[0] - 1
        plan = plan_from_goal(weights, config, ep.sentence, ep.frames[0],
                              ep.joints[0], t_len, budget, rng.spawn(2 * i))
        errors.append(vp_error(plan, ep))
        lang = infer_language(weights, config, ep.frames, ep.joints, budget,
                              rng.spawn(2 * i + 1))
        inferred.append(lang.sentence)
    success = language_success_rate(inferred, [ep.sentence
                                               for ep in episodes])
    return errors, success


def run_condition(group, ratio, seed, world_config, model_config, run,
                  budget, per_combo_train=3, per_combo_test=1, ablation=(),
                  condition=None):
    """Train one (group, ratio, seed) cell and score U-P and U-C pools.
    Returns flat metric rows ready for the DSV table."""
    manifest = build_splits(group, ratio, seed)
    pools = generate_dataset(manifest, world_config, seed,
                             per_combo_train, per_combo_test)
    cfg = apply_ablation(model_config, ablation) if ablation else model_config
    checkpoint, _ = train(pools["train"], cfg, run, seed)
    weights = unpack_weights(checkpoint)
    condition = condition or f"{group}{ratio}"
    rows = []
    for key, (split, pool) in enumerate((("U-P", pools["up"]),
                                         ("U-C", pools["uc"]))):
        if not pool:
            continue
        errors, success = evaluate_split(weights, cfg, pool, budget,
                                         Rng(seed).spawn(key + 1))
        for metric, values in (("visual", [e.visual for e in errors]),
                               ("proprio", [e.proprio for e in errors]),
                               ("vp_error", [e.combined for e in errors])):
            rows.append({"condition": condition, "seed": seed,
                         "split": split, "metric": metric,
                         "value": float(np.mean(values))})
        rows.append({"condition": condition, "seed": seed, "split": split,
                     "metric": "language_success", "value": success})
    return rows


def run_experiment(cells, seeds, world_config, model_config, run, budget,
                   per_combo_train=3, per_combo_test=1, out_path=None):
    """Sweep (group, ratio) cells over seeds; emit per-cell rows plus
    pairwise significance tests on the U-C combined error."""
    rows = []
    for group, ratio in cells:
        for seed in seeds:
            rows.extend(run_condition(group, ratio, seed, world_config,
                                      model_config, run, budget,
                                      per_combo_train, per_combo_test))
    comparisons = pairwise_welch(rows, metric="vp_error", split="U-C")
    if out_path is not None:
        write_dsv(out_path, rows)
    return rows, comparisons


def run_ablation(group, ratio, seed, world_config, model_config, run, budget,
                 per_combo_train=3, per_combo_test=1, conditions=None):
    """One row set per ablation condition, same data and seed throughout."""
    conditions = conditions or ABLATIONS
    rows = []
    for name, flags in conditions.items():
        rows.extend(run_condition(group, ratio, seed, world_config,
                                  model_config, run, budget,
                                  per_combo_train, per_combo_test,
                                  ablation=flags, condition=name))
    return rows


def aggregate(rows):
    """(condition, split, metric) -> (mean, sd, n) over seeds."""
    cells = {}
    for r in rows:
        cells.setdefault((r["condition"], r["split"], r["metric"]),
                         []).append(r["value"])
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1
                else 0.0, len(v)) for k, v in cells.items()}


def pairwise_welch(rows, metric, split):
    """Welch tests between every pair of conditions on one metric."""
    per_condition = {}
    for r in rows:
        if r["metric"] == metric and r["split"] == split:
            per_condition.setdefault(r["condition"], []).append(r["value"])
    names = sorted(per_condition)
    out = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if len(per_condition[a]) < 2 or len(per_condition[b]) < 2:
                continue
            res = welch_t(per_condition[a], per_condition[b])
            out.append({"group_1": a, "group_2": b,
                        "t_statistic": res.t_statistic,
                        "p_value": res.p_value,
                        "degrees_of_freedom": res.degrees_of_freedom})
    return out


def write_dsv(path, rows, header=DSV_HEADER):
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join(repr(r[k]) if isinstance(r[k], float)
                               else str(r[k]) for k in header))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dsv(path, header=DSV_HEADER):
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != tuple(header):
        raise ValueError(f"unexpected table header in {path}")
    rows = []
    for line in lines[1:]:
        parts = line.split("\t")
        row = dict(zip(header, parts))
        if "value" in row:
            row["value"] = float(row["value"])
        if "seed" in row:
            row["seed"] = int(row["seed"])
        rows.append(row)
    return rows
