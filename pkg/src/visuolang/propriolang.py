"""Proprioceptive and language machinery: the softmax joint-angle codec, the
three feed-forward heads driven by the first proprioceptive LSTM layer (joint
prediction, attention parameters, second-canvas transform), and the
bias-conditioned word-sequence network with its sentence codec.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .cells import LstmState, init_lstm_weights, lstm_step
from .diffcore import Tensor

JOINT_BINS = 10
# kernel width of the joint encoding, in units of bin spacing; narrow enough
# that expectation decoding round-trips interior angles within spacing/10
SIGMA_ENC_FACTOR = 0.5

SENTENCE_LEN = 5
VOCAB_SIZE = 20
LANG_HIDDEN = 40


# -- joint-angle softmax codec --------------------------------------------------

def joint_bin_centers(k=JOINT_BINS, dtype=np.float64):
    """k bin centers spanning [0, 1] endpoint to endpoint."""
    return np.linspace(0.0, 1.0, k, dtype=dtype)


def encode_joints(angles, k=JOINT_BINS):
    """Normalized joint angles [..., J] in [0, 1] -> per-joint softmax rows
    [..., J, k]: a Gaussian bump over the bin grid, normalized to sum 1."""
    angles = np.asarray(angles, dtype=np.float64)
    if np.any(angles < 0.0) or np.any(angles > 1.0):
        raise ValueError(
            f"joint angles must lie in [0, 1]; got range "
            f"[{angles.min()}, {angles.max()}]")
    centers = joint_bin_centers(k)
    sigma = SIGMA_ENC_FACTOR / (k - 1)
    logits = -((angles[..., None] - centers) ** 2) / (2.0 * sigma * sigma)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_joints(soft, k=None):
    """Per-joint expectation over bin centers; inverse of encode_joints up to
    grid-truncation error. Accepts plain arrays or graph tensors (the latter
    stay differentiable)."""
    data = soft.data if isinstance(soft, Tensor) else np.asarray(soft)
    if np.any(data < -1e-9) or np.any(np.abs(data.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("joint softmax rows must be points on the simplex")
    centers = joint_bin_centers(data.shape[-1], dtype=data.dtype)
    if isinstance(soft, Tensor):
        return (soft * Tensor(centers)).sum(axis=-1)
    return data @ centers


# -- feed-forward heads ---------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def init_mlp_head(in_dim, out_dim, rng, hidden=256, dtype=np.float64, prefix=""):
    """Dense -> layer norm -> relu -> dense."""
    def uni(shape, fan):
        bound = 1.0 / np.sqrt(max(fan, 1))
        return Tensor(rng.uniform(-bound, bound, shape, dtype), requires_grad=True)

    return {
        prefix + "W1": uni((in_dim, hidden), in_dim),
        prefix + "b1": Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        prefix + "gain": Tensor(np.ones(hidden, dtype=dtype), requires_grad=True),
        prefix + "bias": Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        prefix + "W2": uni((hidden, out_dim), hidden),
        prefix + "b2": Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True),
    }


def mlp_head(x: Tensor, weights, prefix="") -> Tensor:
    h = dc.matmul(x, weights[prefix + "W1"]) + weights[prefix + "b1"]
    h = layer_norm(h, weights[prefix + "gain"], weights[prefix + "bias"]).relu()
    return dc.matmul(h, weights[prefix + "W2"]) + weights[prefix + "b2"]


def init_proprio_heads(in_dim, j, k, rng, hidden=256, dtype=np.float64):
    """Three heads with disjoint parameters off the first proprioceptive
    recurrent layer: joint-softmax logits, raw attention parameters, raw
    second-canvas transform parameters."""
    w = {}
    w.update(init_mlp_head(in_dim, j * k, rng, hidden, dtype, prefix="head.joint."))
    w.update(init_mlp_head(in_dim, 4, rng, hidden, dtype, prefix="head.att."))
    w.update(init_mlp_head(in_dim, 6, rng, hidden, dtype, prefix="head.m2."))
    return w


def proprio_heads(m_l1: Tensor, weights, j, k):
    """Returns (joint logits [..., j, k], raw attention [..., 4], raw
    second-canvas transform [..., 6])."""
    logits = mlp_head(m_l1, weights, prefix="head.joint.")
    logits = logits.reshape(*logits.shape[:-1], j, k)
    raw_att = mlp_head(m_l1, weights, prefix="head.att.")
    raw_m2 = mlp_head(m_l1, weights, prefix="head.m2.")
    return logits, raw_att, raw_m2


# -- language network -----------------------------------------------------------

def init_language_weights(pb_dim, rng, vocab=VOCAB_SIZE, hidden=LANG_HIDDEN,
                          dtype=np.float64):
    w = init_lstm_weights(pb_dim + vocab, hidden, rng, dtype, prefix="lang.")
    bound = 1.0 / np.sqrt(hidden)
    w["lang.W_out"] = Tensor(rng.uniform(-bound, bound, (hidden, vocab), dtype),
                             requires_grad=True)
    w["lang.b_out"] = Tensor(np.zeros(vocab, dtype=dtype), requires_grad=True)
    return w


def language_rollout(pb: Tensor, weights, steps=SENTENCE_LEN) -> Tensor:
    """Unroll the word sequence from a parametric bias: the bias is a constant
    input every step, the word input starts as a zero start-of-sequence vector
    and is thereafter the previous step's output distribution (kept soft, so
    the whole rollout is differentiable). Returns [steps, vocab] rows summing
    to 1 (leading batch axis if pb has one)."""
    vocab = weights["lang.W_out"].shape[1]
    hidden = weights["lang.W_out"].shape[0]
    batched = pb.ndim == 2
    lead = (pb.shape[0],) if batched else ()
    state = LstmState(Tensor(np.zeros(lead + (hidden,), dtype=pb.dtype)),
                      Tensor(np.zeros(lead + (hidden,), dtype=pb.dtype)))
    word = Tensor(np.zeros(lead + (vocab,), dtype=pb.dtype))
    rows = []
    for _ in range(steps):
        x = dc.concat([pb, word], axis=-1)
        state = lstm_step(x, None, None, state, weights, prefix="lang.")
        logits = dc.matmul(state.h, weights["lang.W_out"]) + weights["lang.b_out"]
        word = dc.softmax(logits, axis=-1)
        rows.append(word.reshape(*lead, 1, vocab))
    return dc.concat(rows, axis=-2)


# -- sentence codec -------------------------------------------------------------

@dataclass
class Vocabulary:
    """Fixed word list; line number in the vocabulary file is the one-hot
    index."""
    tokens: list

    @classmethod
    def load(cls, path=None):
        if path is None:
            path = Path(__file__).with_name("vocab.txt")
        tokens = [line.strip() for line in
                  Path(path).read_text().splitlines() if line.strip()]
        if len(tokens) != VOCAB_SIZE:
            raise ValueError(
                f"vocabulary must have exactly {VOCAB_SIZE} entries, "
                f"got {len(tokens)}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary entries must be unique")
        if "." not in tokens:
            raise ValueError('vocabulary must contain the terminator "."')
        return cls(tokens=tokens)

    def index(self, token):
        try:
            return self.tokens.index(token)
        except ValueError:
            raise ValueError(
                f"unknown token {token!r}; vocabulary: {self.tokens}") from None

    def encode_sentence(self, words, dtype=np.float64):
        """Token list -> [SENTENCE_LEN, vocab] one-hot rows, zero-padded after
        the terminating '.'."""
        if not words or words[-1] != ".":
            raise ValueError(f'sentence must end with "."; got {words!r}')
        if len(words) > SENTENCE_LEN:
            raise ValueError(
                f"sentence longer than {SENTENCE_LEN} tokens: {words!r}")
        rows = np.zeros((SENTENCE_LEN, len(self.tokens)), dtype=dtype)
        for i, word in enumerate(words):
            rows[i, self.index(word)] = 1.0
        return rows

    def decode_sentence(self, rows):
        """Per-row argmax, stopping after the terminator (zero padding rows
        decode to nothing)."""
        rows = rows.data if isinstance(rows, Tensor) else np.asarray(rows)
        words = []
        for row in rows:
            if not row.any():
                break
            word = self.tokens[int(row.argmax())]
            words.append(word)
            if word == ".":
                break
        return words
