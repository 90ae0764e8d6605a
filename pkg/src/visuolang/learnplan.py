"""Optimization: Adam with global-norm clipping, the free-energy training
loop (per-sequence adaptive posteriors and bias vectors trained jointly with
the network), plan generation from a linguistic goal, and language inference
from an observed visuo-motor sequence (network weights frozen in both
inference modes; only the adaptive variables move).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import objective as obj
from .diffcore import NonFiniteError, Rng, Tensor
from .model import Checkpoint, ModelConfig, init_model_weights, rollout
from .propriolang import encode_joints
from .pvrnn import AdaptiveA, kl_gaussian
from .vision import focal_weights

# spread of the per-sequence bias initialization (pre-squash)
PB_INIT_SCALE = 0.3


@dataclass
class TrainRunConfig:
    epochs: int = 5000
    lr: float = 5e-4
    clip: float = 0.2
    seeds: tuple = (0, 5, 10, 15, 20)
    batch_strategy: str = "full"
    # epoch after which sequences are rolled out self-fed instead of
    # teacher-forced; None keeps teacher forcing throughout.  Self-feeding
    # from scratch diverges, but planning and language inference both run
    # the model on its own predictions, so a closed-loop phase after the
    # teacher-forced warmup is what makes the generative replay faithful
    closed_after: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0 or self.epochs < 1:
            raise ValueError("epochs, learning rate and clip must be positive")
        if self.closed_after is not None and self.closed_after < 0:
            raise ValueError("closed_after must be None or >= 0")


@dataclass
class InferenceBudget:
    iterations: int = 50
    samples_per_iteration: int = 5

    def __post_init__(self):
        if self.iterations < 1 or self.samples_per_iteration < 1:
            raise ValueError("inference budget entries must be >= 1")


@dataclass
class PlanResult:
    frames: np.ndarray        # best rollout's frames [T, C, H, W]
    joints: np.ndarray        # decoded joint angles [T, J]
    sentence: np.ndarray      # word distributions [5, vocab]
    a_mu: np.ndarray
    a_sigma: np.ndarray
    pb: np.ndarray            # squashed bias of the best solution
    best_loss: float
    trace: list = field(default_factory=list)  # per-iteration mean goal loss


# -- optimizer ---------------------------------------------------------------------

def adam_init(params):
    return {"m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()},
            "step": 0}


def adam_step(params, grads, moments, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam update; returns the moments."""
    b1, b2 = betas
    moments["step"] += 1
    t = moments["step"]
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        m = moments["m"][k] = b1 * moments["m"][k] + (1 - b1) * g
        v = moments["v"][k] = b2 * moments["v"][k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return moments


def clip_global_norm(grads, threshold):
    """Rescale the whole gradient dict so its global norm is at most the
    threshold; returns the pre-clip norm."""
    # iterate in sorted order so the norm is independent of dict insertion
    # order (keeps resumed runs bit-identical to uninterrupted ones)
    total = np.sqrt(sum(float((grads[k] * grads[k]).sum())
                        for k in sorted(grads)))
    if total > threshold and total > 0:
        scale = threshold / total
        for g in grads.values():
            g *= scale
    return total


# -- training ----------------------------------------------------------------------


def sequence_loss(episode, a, pb_raw, weights, config: ModelConfig, rng,
                  mode="open"):
    """Free-energy loss of one teacher-forced sequence: focally weighted
    visual error, joint-softmax KL, language squared error, binding loss and
    the weighted prior/posterior divergence."""
    pb = pb_raw.tanh()
    preds, sentence = rollout(episode.frames, episode.joints, a, pb, weights,
                              config, mode, rng)
    n = config.image_size
    l_v = obj.loss_vision(
        [p.frame for p in preds], list(episode.frames[1:]),
        [focal_weights(p.att, n, config.alpha_s) for p in preds])
    l_m = obj.loss_proprio([p.joint_softmax for p in preds],
                           list(episode.joints[1:]))
    l_s = obj.loss_language(sentence, episode.sentence)
    # the binding term treats the sequence bias as a fixed target: its
    # gradient shapes the per-step readout (through the weights and the
    # adaptive variables) but never drags the bias itself toward the readout
    # mean, which would collapse every sequence onto one bias and leave
    # goal-directed inference with nothing to discriminate
    l_pb = obj.loss_binding([p.pb_tilde for p in preds], pb.detach(),
                            config.binding_k)
    kl = Tensor(np.array(0.0))
    for p in preds:
        kl = kl + kl_gaussian(p.mu_q, p.sigma_q, p.mu_p, p.sigma_p)
    return obj.total_training_loss(l_v, l_m, l_s, l_pb, kl, config.w), preds


def _leaves(weights, adaptives, pb_raws):
    leaves = dict(weights)
    for i, a in enumerate(adaptives):
        leaves[f"a.{i}.mu"] = a.a_mu
        leaves[f"a.{i}.sigma"] = a.a_sigma
    for i, pb in enumerate(pb_raws):
        leaves[f"pb.{i}"] = pb
    return leaves


def train(episodes, config: ModelConfig, run: TrainRunConfig, seed=0,
          resume: Checkpoint = None, trace_path=None, epoch_hook=None):
    """Full-batch free-energy training; every episode owns an adaptive
    posterior and a raw (pre-squash) bias vector, updated together with the
    network weights. Returns (Checkpoint, trace)."""
    rng = Rng(seed)
    n_seq = len(episodes)
    t_lens = [len(ep.frames) - 1 for ep in episodes]

    if resume is not None:
        weights, adaptives, pb_raws, moments = _unpack(resume, config, t_lens)
        rng.set_state(resume.rng_state)
        start_epoch = resume.epoch
    else:
        weights = init_model_weights(config, rng)
        adaptives = [AdaptiveA.zeros(t, config.z_dim) for t in t_lens]
        # per-sequence biases start spread out rather than at zero: with all
        # biases identical the language loss sits in a symmetric saddle (no
        # gradient can tell the sequences apart) and the binding loss then
        # collapses every bias to the common mean, leaving nothing for
        # goal-directed inference to lock onto
        pb_raws = [Tensor(PB_INIT_SCALE * rng.normal(config.pb_dim),
                          requires_grad=True)
                   for _ in range(n_seq)]
        moments = None
        start_epoch = 0

    leaves = _leaves(weights, adaptives, pb_raws)
    if moments is None:
        moments = adam_init(leaves)

    trace = []
    for epoch in range(start_epoch + 1, run.epochs + 1):
        total = Tensor(np.array(0.0))
        parts = np.zeros(5)
        mode = ("closed" if run.closed_after is not None
                and epoch > run.closed_after else "open")
        for i, ep in enumerate(episodes):
            try:
                lb, _ = sequence_loss(ep, adaptives[i], pb_raws[i], weights,
                                      config, rng, mode)
            except NonFiniteError as e:
                raise RuntimeError(
                    f"non-finite value at epoch {epoch}, sequence {i}: {e}"
                ) from e
            total = total + lb.total
            parts += [lb.l_v.item(), lb.l_m.item(), lb.l_s.item(),
                      lb.l_pb.item(), lb.kl.item()]
        if not np.isfinite(total.item()):
            raise RuntimeError(f"non-finite loss at epoch {epoch}")

        for p in leaves.values():
            p.grad = None
        total.backward()
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in leaves.items()}
        clip_global_norm(grads, run.clip)
        adam_step(leaves, grads, moments, run.lr)

        record = {"epoch": epoch, "l_v": parts[0], "l_m": parts[1],
                  "l_s": parts[2], "l_pb": parts[3], "kl": parts[4],
                  "total": total.item()}
        trace.append(record)
        if epoch_hook is not None:
            epoch_hook(record)

    if trace_path is not None:
        write_trace(trace_path, trace)
    return _pack(config, weights, adaptives, pb_raws, moments, run.epochs,
                 rng), trace


def _pack(config, weights, adaptives, pb_raws, moments, epoch, rng):
    tensors = {f"w.{k}": v.data for k, v in weights.items()}
    for i, a in enumerate(adaptives):
        tensors[f"a.{i}.mu"] = a.a_mu.data
        tensors[f"a.{i}.sigma"] = a.a_sigma.data
    for i, pb in enumerate(pb_raws):
        tensors[f"pb.{i}"] = pb.data
    leaves = _leaves(weights, adaptives, pb_raws)
    for k in leaves:
        tensors[f"opt.m.{k}"] = moments["m"][k]
        tensors[f"opt.v.{k}"] = moments["v"][k]
    return Checkpoint(config=config, tensors=tensors, epoch=epoch,
                      adam_step=moments["step"], rng_state=rng.get_state())


def _unpack(ckpt: Checkpoint, config: ModelConfig, t_lens):
    weights = {k[2:]: Tensor(v.copy(), requires_grad=True)
               for k, v in ckpt.tensors.items() if k.startswith("w.")}
    adaptives, pb_raws = [], []
    for i, t in enumerate(t_lens):
        mu = ckpt.tensors[f"a.{i}.mu"]
        if mu.shape[0] != t:
            raise ValueError(
                f"checkpoint sequence {i} has {mu.shape[0]} steps, "
                f"dataset has {t}")
        adaptives.append(AdaptiveA(
            Tensor(mu.copy(), requires_grad=True),
            Tensor(ckpt.tensors[f"a.{i}.sigma"].copy(), requires_grad=True)))
        pb_raws.append(Tensor(ckpt.tensors[f"pb.{i}"].copy(),
                              requires_grad=True))
    leaves = _leaves(weights, adaptives, pb_raws)
    moments = {"m": {k: ckpt.tensors[f"opt.m.{k}"].copy() for k in leaves},
               "v": {k: ckpt.tensors[f"opt.v.{k}"].copy() for k in leaves},
               "step": ckpt.adam_step}
    return weights, adaptives, pb_raws, moments


def unpack_weights(ckpt: Checkpoint):
    """Network weights from a checkpoint, as graph leaves."""
    return {k[2:]: Tensor(v.copy(), requires_grad=True)
            for k, v in ckpt.tensors.items() if k.startswith("w.")}


def write_trace(path, trace):
    with open(path, "w") as f:
        f.write("epoch\tl_v\tl_m\tl_s\tl_pb\tkl\ttotal\n")
        for r in trace:
            f.write(f"{r['epoch']}\t{r['l_v']:.8g}\t{r['l_m']:.8g}\t"
                    f"{r['l_s']:.8g}\t{r['l_pb']:.8g}\t{r['kl']:.8g}\t"
                    f"{r['total']:.8g}\n")


# -- inference ----------------------------------------------------------------------


def _weight_checksum(weights):
    return sum(float(np.abs(v.data).sum()) for v in weights.values())


def _snapshot(preds, sentence, a, pb):
    return dict(
        frames=np.stack([p.frame.data for p in preds]),
        joints=np.stack([p.joints.data for p in preds]),
        sentence=sentence.data.copy(),
        a_mu=a.a_mu.data.copy(), a_sigma=a.a_sigma.data.copy(),
        pb=np.tanh(pb.data.copy()))


def _infer(weights, config, t_len, budget, rng, loss_fn, lr):
    """Shared inference loop: optimize (A, raw bias) against ``loss_fn``;
    track the best rollout over the full iteration x sample grid."""
    before = _weight_checksum(weights)
    a = AdaptiveA.zeros(t_len, config.z_dim)
    pb_raw = Tensor(np.zeros(config.pb_dim), requires_grad=True)
    leaves = {"a.mu": a.a_mu, "a.sigma": a.a_sigma, "pb": pb_raw}
    moments = adam_init(leaves)
    best = None
    trace = []
    for _ in range(budget.iterations):
        mean_loss = Tensor(np.array(0.0))
        losses = []
        for _ in range(budget.samples_per_iteration):
            lb, preds, sentence = loss_fn(a, pb_raw, rng)
            mean_loss = mean_loss + lb.total
            losses.append(lb.total.item())
            if best is None or lb.total.item() < best["loss"]:
                best = {"loss": lb.total.item(),
                        **_snapshot(preds, sentence, a, pb_raw)}
        mean_loss = mean_loss * (1.0 / budget.samples_per_iteration)
        for p in leaves.values():
            p.grad = None
        mean_loss.backward()
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in leaves.items()}
        adam_step(leaves, grads, moments, lr)
        trace.append(float(np.mean(losses)))
    assert _weight_checksum(weights) == before, "network weights moved"
    return PlanResult(frames=best["frames"], joints=best["joints"],
                      sentence=best["sentence"], a_mu=best["a_mu"],
                      a_sigma=best["a_sigma"], pb=best["pb"],
                      best_loss=best["loss"], trace=trace)


def plan_from_goal(weights, config: ModelConfig, goal_sentence, initial_frame,
                   initial_joints, t_len, budget: InferenceBudget, rng,
                   lr=5e-3):
    """Infer a visuo-motor plan whose language readout matches the goal
    sentence (one-hot rows [5, vocab]); weights stay fixed."""
    goal_sentence = np.asarray(goal_sentence, dtype=np.float64)
    frames = np.broadcast_to(initial_frame, (t_len + 1,) + initial_frame.shape)
    joints = np.broadcast_to(initial_joints, (t_len + 1,) + initial_joints.shape)

    def loss_fn(a, pb_raw, rng):
        pb = pb_raw.tanh()
        preds, sentence = rollout(frames, joints, a, pb, weights, config,
                                  "closed", rng)
        kl = Tensor(np.array(0.0))
        for p in preds:
            kl = kl + kl_gaussian(p.mu_q, p.sigma_q, p.mu_p, p.sigma_p)
        # as in training, binding treats the bias as a fixed target: the
        # language term alone steers the bias into the goal sentence's
        # basin, and binding then pulls the trajectory (through the
        # adaptive variables) toward behavior whose readout matches it;
        # with a live bias the much larger binding term instead drags the
        # bias onto whatever the fresh trajectory's readout happens to be
        lb = obj.goal_loss_language_target(
            sentence, goal_sentence, [p.pb_tilde for p in preds],
            pb.detach(), kl, k=config.binding_k, w=config.w)
        return lb, preds, sentence

    return _infer(weights, config, t_len, budget, rng, loss_fn, lr)


def infer_language(weights, config: ModelConfig, obs_frames, obs_joints,
                   budget: InferenceBudget, rng, lr=5e-3):
    """Infer the sentence describing an observed visuo-motor sequence;
    returns a PlanResult whose sentence field holds the inferred word
    distributions."""
    obs_frames = np.asarray(obs_frames, dtype=np.float64)
    obs_joints = np.asarray(obs_joints, dtype=np.float64)
    t_len = len(obs_frames) - 1
    n = config.image_size
    obs_soft = [encode_joints(obs_joints[t], config.bins)
                for t in range(1, t_len + 1)]

    def loss_fn(a, pb_raw, rng):
        pb = pb_raw.tanh()
        preds, sentence = rollout(obs_frames, obs_joints, a, pb, weights,
                                  config, "closed", rng)
        kl = Tensor(np.array(0.0))
        for p in preds:
            kl = kl + kl_gaussian(p.mu_q, p.sigma_q, p.mu_p, p.sigma_p)
        lb = obj.goal_loss_observation(
            [p.frame for p in preds], list(obs_frames[1:]),
            [focal_weights(p.att, n, config.alpha_s) for p in preds],
            [p.joint_softmax for p in preds], obs_soft,
            [p.pb_tilde for p in preds], pb, kl,
            k=config.binding_k, w=config.w)
        return lb, preds, sentence

    return _infer(weights, config, t_len, budget, rng, loss_fn, lr)
