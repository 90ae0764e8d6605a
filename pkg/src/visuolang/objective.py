"""Loss terms: focally weighted visual reconstruction, categorical KL on the
joint softmax, squared-error language loss, the bias binding penalty, the
meta-prior-weighted training total, and the two goal losses used during
inference (one scored against a linguistic goal, one against an observed
visuo-motor sequence).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor
from .propriolang import encode_joints

BINDING_COEFF = 100.0
META_PRIOR_W = 0.05
_PROB_FLOOR = 1e-8


def _zero():
    return Tensor(np.array(0.0))


@dataclass
class LossBreakdown:
    """Per-term totals; ``total`` is the graph node to differentiate and
    always equals l_v + l_m + l_s + l_pb + w*kl by construction."""
    l_v: Tensor
    l_m: Tensor
    l_s: Tensor
    l_pb: Tensor
    kl: Tensor
    w: float
    total: Tensor


def _assemble(l_v, l_m, l_s, l_pb, kl, w) -> LossBreakdown:
    if w < 0:
        raise ValueError(f"meta-prior weight must be nonnegative, got {w}")
    total = l_v + l_m + l_s + l_pb + kl * w
    return LossBreakdown(l_v=l_v, l_m=l_m, l_s=l_s, l_pb=l_pb, kl=kl, w=w,
                         total=total)


def loss_vision(preds, targets, focal) -> Tensor:
    """Sum over time of focally weighted squared pixel error.

    ``preds``/``targets``: sequences of frames [..., C, H, W];
    ``focal``: per-step weights [..., H, W], broadcast over channels.
    """
    if not (len(preds) == len(targets) == len(focal)):
        raise ValueError(
            f"sequence lengths differ: {len(preds)} predictions, "
            f"{len(targets)} targets, {len(focal)} weight maps")
    out = _zero()
    for pred, target, c_att in zip(preds, targets, focal):
        target = target if isinstance(target, Tensor) else Tensor(target)
        diff = pred - target
        w = c_att if isinstance(c_att, Tensor) else Tensor(c_att)
        w = w.reshape(*w.shape[:-2], 1, *w.shape[-2:])  # broadcast over C
        out = out + (w * diff * diff).sum()
    return out


def loss_proprio(pred_soft, targets) -> Tensor:
    """Sum over time and joints of KL(target distribution || prediction).

    ``pred_soft``: sequence of joint softmax rows [..., J, K] (graph tensors);
    ``targets``: matching distributions, or raw angles [..., J] which are
    softmax-encoded here. Predictions are floored at 1e-8 (renormalized) so
    the log never sees zero.
    """
    if len(pred_soft) != len(targets):
        raise ValueError(
            f"sequence lengths differ: {len(pred_soft)} predictions, "
            f"{len(targets)} targets")
    out = _zero()
    for pred, target in zip(pred_soft, targets):
        target = np.asarray(target.data if isinstance(target, Tensor) else target)
        if target.shape != pred.shape:
            target = encode_joints(target, k=pred.shape[-1])
        # max(q, floor) via relu, then renormalize; a no-op wherever the
        # prediction already clears the floor
        floored = (pred - _PROB_FLOOR).relu() + _PROB_FLOOR
        floored = floored / floored.sum(axis=-1, keepdims=True)
        # 0 * log(0) = 0 on the (constant) target side
        p_log_p = np.where(target > 0, target * np.log(np.maximum(target, 1e-300)), 0.0)
        out = out + Tensor(p_log_p.sum()) - (Tensor(target) * floored.log()).sum()
    return out


def loss_language(pred: Tensor, target) -> Tensor:
    """Summed squared error over all word rows, zero padding included."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"sentence shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).sum()


def loss_binding(pb_tilde, pb, k=BINDING_COEFF) -> Tensor:
    """k * sum over time of the squared distance between the per-step bias
    prediction and the sequence's bias vector."""
    if k <= 0:
        raise ValueError(f"binding coefficient must be positive, got {k}")
    out = _zero()
    for pbt in pb_tilde:
        diff = pbt - pb
        out = out + (diff * diff).sum()
    return out * k


def total_training_loss(l_v, l_m, l_s, l_pb, kl, w=META_PRIOR_W) -> LossBreakdown:
    return _assemble(l_v, l_m, l_s, l_pb, kl, w)


def goal_loss_language_target(pred_sentence, goal_sentence, pb_tilde, pb, kl,
                              k=BINDING_COEFF, w=META_PRIOR_W) -> LossBreakdown:
    """Goal loss for planning from a sentence: language + binding + weighted
    KL; no visuo-proprioceptive terms (the goal is linguistic)."""
    return _assemble(
        l_v=_zero(),
        l_m=_zero(),
        l_s=loss_language(pred_sentence, goal_sentence),
        l_pb=loss_binding(pb_tilde, pb, k),
        kl=kl,
        w=w)


def goal_loss_observation(pred_frames, obs_frames, focal, pred_soft, obs_joints,
                          pb_tilde, pb, kl, k=BINDING_COEFF,
                          w=META_PRIOR_W) -> LossBreakdown:
    """Goal loss for inferring language from an observed sequence: vision +
    proprioception + binding + weighted KL; no language term (language is the
    unknown)."""
    return _assemble(
        l_v=loss_vision(pred_frames, obs_frames, focal),
        l_m=loss_proprio(pred_soft, obs_joints),
        l_s=_zero(),
        l_pb=loss_binding(pb_tilde, pb, k),
        kl=kl,
        w=w)
