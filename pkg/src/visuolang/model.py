"""The full network: attended visual input, stacked convLSTM and LSTM
pathways coupled by lateral and top-down connections, the associative
variational layer on top, the visual working-memory / fusion chain, the
proprioceptive and language heads, ablation variants, and checkpoint
persistence.

Cross-pathway coupling is one-step delayed: every lateral and top-down signal
consumed at step t is computed from step t-1 activations, which removes any
within-step ordering ambiguity.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from . import vision
from .cells import (ConvLstmState, LstmState, convlstm_step,
                    init_convlstm_weights, init_lstm_weights, lstm_step)
from .diffcore import Tensor
from .propriolang import (decode_joints, encode_joints, init_language_weights,
                          init_proprio_heads, language_rollout, proprio_heads)
from .pvrnn import (AdaptiveA, MtrnnState, init_pvrnn_weights, mtrnn_step,
                    pb_readout, posterior_sample, prior_step)

CONV_KERNEL = 5
CONV_STRIDE = 2
CONV_PAD = 2


@dataclass
class ModelConfig:
    image_size: int = 64
    image_channels: int = 3
    attention_ratio: float = 0.625
    conv_channels: tuple = (16, 32, 64)
    lstm_sizes: tuple = (256, 128, 64)
    d_dim: int = 256
    z_dim: int = 20
    pb_dim: int = 10
    lang_hidden: int = 40
    vocab_size: int = 20
    joints: int = 6
    bins: int = 10
    tau: float = 2.0
    w: float = 0.05
    binding_k: float = 100.0
    alpha_s: float = 4.0
    head_hidden: int = 256
    ablate_vwm1: bool = False
    ablate_vwm2: bool = False
    ablate_attention: bool = False

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.lstm_sizes = tuple(self.lstm_sizes)
        if len(self.conv_channels) != len(self.lstm_sizes):
            raise ValueError(
                f"pathway depths differ: {len(self.conv_channels)} conv vs "
                f"{len(self.lstm_sizes)} lstm layers")
        if not 0.0 < self.attention_ratio <= 1.0:
            raise ValueError(
                f"attention ratio must be in (0, 1], got {self.attention_ratio}")
        if self.attended_size < 2:
            raise ValueError("attended window too small")
        if self.w < 0:
            raise ValueError(f"complexity weight w must be >= 0, got {self.w}")
        if self.binding_k < 0:
            raise ValueError(f"binding_k must be >= 0, got {self.binding_k}")
        if self.tau < 1.0:
            raise ValueError(f"time constant tau must be >= 1, got {self.tau}")

    @property
    def depth(self):
        return len(self.conv_channels)

    @property
    def attended_size(self):
        return int(round(self.image_size * self.attention_ratio))

    def conv_sizes(self):
        """Spatial extent of every convLSTM layer, bottom to top."""
        sizes = []
        s = self.attended_size
        for _ in range(self.depth):
            s = (s + 2 * CONV_PAD - CONV_KERNEL) // CONV_STRIDE + 1
            if s < 1:
                raise ValueError("image too small for the conv stack")
            sizes.append(s)
        return sizes

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"unknown config key: {key!r}")
            kwargs[key] = _parse_field(key, val)
        return cls(**kwargs)


def _parse_field(key, val):
    booleans = {"ablate_vwm1", "ablate_vwm2", "ablate_attention"}
    tuples = {"conv_channels", "lstm_sizes"}
    floats = {"attention_ratio", "tau", "w", "binding_k", "alpha_s"}
    if key in booleans:
        if val.lower() not in ("true", "false"):
            raise ValueError(f"config key {key} expects true/false, got {val!r}")
        return val.lower() == "true"
    if key in tuples:
        return tuple(int(x) for x in val.split(","))
    if key in floats:
        return float(val)
    return int(val)


def apply_ablation(config: ModelConfig, flags) -> ModelConfig:
    """Flags: subset of {"no-vwm1", "no-vwm2", "no-attention"}."""
    allowed = {"no-vwm1": "ablate_vwm1", "no-vwm2": "ablate_vwm2",
               "no-attention": "ablate_attention"}
    updates = {}
    for flag in flags:
        if flag not in allowed:
            raise ValueError(f"unknown ablation flag {flag!r}; "
                             f"choose from {sorted(allowed)}")
        updates[allowed[flag]] = True
    return replace(config, **updates)


# -- weight construction ----------------------------------------------------------


def _deconv_kernel_size(src, target):
    """Kernel that maps spatial extent src -> target at stride 2, padding 2."""
    k = target - 2 * src + 6
    if k < 1 or (src - 1) * 2 - 4 + k != target:
        raise ValueError(f"no stride-2 deconv maps extent {src} to {target}")
    return k


def init_model_weights(config: ModelConfig, rng, dtype=np.float64):
    w = {}
    cc, ls = config.conv_channels, config.lstm_sizes
    sizes = config.conv_sizes()
    in_feat = config.joints * config.bins

    def uni(shape, fan):
        bound = 1.0 / np.sqrt(max(fan, 1))
        return Tensor(rng.uniform(-bound, bound, shape, dtype), requires_grad=True)

    for l in range(config.depth):
        c_in = config.image_channels if l == 0 else cc[l - 1]
        w.update(init_convlstm_weights(c_in, cc[l], CONV_KERNEL, rng, dtype,
                                       prefix=f"conv{l + 1}."))
        n_in = in_feat if l == 0 else ls[l - 1]
        w.update(init_lstm_weights(n_in, ls[l], rng, dtype,
                                   prefix=f"lstm{l + 1}."))
        # lateral projections (t-1 cross-pathway context into the gates)
        w[f"lat.v{l + 1}.W"] = uni((ls[l], 4 * cc[l]), ls[l])
        conv_flat = cc[l] * sizes[l] * sizes[l]
        w[f"lat.m{l + 1}.W"] = uni((conv_flat, 4 * ls[l]), conv_flat)
        # top-down projections
        if l + 1 < config.depth:
            k = _deconv_kernel_size(sizes[l + 1], sizes[l])
            fan = cc[l + 1] * k * k
            w[f"td.v{l + 1}.W"] = uni((cc[l + 1], 4 * cc[l], k, k), fan)
            w[f"td.m{l + 1}.W"] = uni((ls[l + 1], 4 * ls[l]), ls[l + 1])
        else:
            w[f"td.v{l + 1}.W"] = uni((config.d_dim, 4 * cc[l]), config.d_dim)
            w[f"td.m{l + 1}.W"] = uni((config.d_dim, 4 * ls[l]), config.d_dim)

    top = config.depth - 1
    v_dim = cc[top] * sizes[top] * sizes[top]
    w.update(init_pvrnn_weights(config.d_dim, config.z_dim, v_dim, ls[top],
                                config.pb_dim, rng, dtype))
    w.update(init_proprio_heads(ls[0], config.joints, config.bins, rng,
                                config.head_hidden, dtype))
    w.update(init_language_weights(config.pb_dim, rng, config.vocab_size,
                                   config.lang_hidden, dtype))

    # visual heads: deconvs from the first conv layer up to the attended window
    k = _deconv_kernel_size(sizes[0], config.attended_size)
    fan = cc[0] * k * k
    for name, out_c in (("net", config.image_channels), ("gatt", 2), ("gnet", 2)):
        w[f"vhead.{name}.W"] = uni((cc[0], out_c, k, k), fan)
        w[f"vhead.{name}.b"] = Tensor(np.zeros(out_c, dtype=dtype),
                                      requires_grad=True)
    # bias the composition gates so an untrained model copies its canvases
    # (write/compose gates start mostly closed, the canvas-keep gate mostly
    # open); the first frames then reproduce the initial observation instead
    # of a half-blended decoder output
    w["vhead.gatt.b"].data[:] = -1.5               # canvas write, frame compose
    w["vhead.gnet.b"].data[:] = [1.5, -1.5]        # canvas keep, fusion
    return w


# -- step state ---------------------------------------------------------------------


@dataclass
class StepState:
    t: int
    conv: list               # ConvLstmState per layer
    lstm: list                # LstmState per layer
    assoc: MtrnnState
    vwm1: Tensor
    vwm2: Tensor
    prev_frame: Tensor
    prev_joint_soft: Tensor
    prev_att: vision.AttentionParams


@dataclass
class StepPrediction:
    frame: Tensor
    joint_softmax: Tensor
    joints: Tensor
    att: vision.AttentionParams
    m2_affine: Tensor
    masks: dict
    pb_tilde: Tensor
    mu_p: Tensor = None
    sigma_p: Tensor = None
    mu_q: Tensor = None
    sigma_q: Tensor = None
    z_q: Tensor = None


def _lead(config, frame):
    """Leading batch shape of an input frame (empty for single sequences)."""
    return frame.shape[:-3]


def init_state(config: ModelConfig, initial_frame, initial_joints,
               dtype=np.float64) -> StepState:
    """Fresh state at t=0: zero recurrent activations, both canvases primed
    from the initial observed frame, previous attention at full frame."""
    frame = initial_frame if isinstance(initial_frame, Tensor) else Tensor(
        np.asarray(initial_frame, dtype=dtype))
    lead = _lead(config, frame)
    batch = lead[0] if lead else None
    sizes = config.conv_sizes()
    n_att = config.attended_size

    def zt(*shape):
        return Tensor(np.zeros(lead + shape, dtype=dtype))

    conv = [ConvLstmState(zt(c, s, s), zt(c, s, s))
            for c, s in zip(config.conv_channels, sizes)]
    lstm = [LstmState(zt(n), zt(n)) for n in config.lstm_sizes]
    assoc = MtrnnState(zt(config.d_dim), zt(config.d_dim), tau=config.tau)
    ident = vision.identity_attention(batch, dtype=dtype)
    vwm2 = vision.attend(frame, ident, out_hw=(n_att, n_att))
    joint_soft = Tensor(encode_joints(np.asarray(initial_joints), config.bins)
                        .astype(dtype))
    return StepState(t=0, conv=conv, lstm=lstm, assoc=assoc,
                     vwm1=frame, vwm2=Tensor(vwm2.data),
                     prev_frame=frame, prev_joint_soft=joint_soft,
                     prev_att=ident)


# -- forward step --------------------------------------------------------------------


def _dense_gates(h, weight, spatial=False):
    """Project a vector (or batch of vectors) onto gate pre-activations;
    optionally append singleton spatial axes for convLSTM gates."""
    out = dc.matmul(h, weight)
    if spatial:
        return out.reshape(*out.shape, 1, 1)
    return out


def _flatten_map(x, lead):
    if lead:
        return x.reshape(x.shape[0], -1)
    return x.flatten()


def forward_step(state: StepState, inputs, z_q, pb, weights,
                 config: ModelConfig, mode="open"):
    """One synchronous update of the whole network.

    ``inputs``: dict with "frame" [..., C, H, W] and "joint_soft" [..., J, K]
    (ignored in closed mode, where the previous step's own predictions are
    fed back). Returns (StepPrediction, StepState).
    """
    if mode not in ("open", "closed"):
        raise ValueError(f"mode must be 'open' or 'closed', got {mode!r}")
    t = state.t + 1
    lead = _lead(config, state.prev_frame)
    batch = lead[0] if lead else None
    n_att = config.attended_size
    depth = config.depth

    if mode == "closed" and t > 1:
        frame_in = state.prev_frame
        joint_in = state.prev_joint_soft
    else:
        frame_in = inputs["frame"]
        joint_in = inputs["joint_soft"]
        frame_in = frame_in if isinstance(frame_in, Tensor) else Tensor(frame_in)
        joint_in = joint_in if isinstance(joint_in, Tensor) else Tensor(joint_in)

    # input encoding: attend with the previous step's window
    att_in = (vision.identity_attention(batch, dtype=frame_in.dtype)
              if config.ablate_attention else state.prev_att)
    v_in = vision.attend(frame_in, att_in, out_hw=(n_att, n_att))
    m_in = _flatten_map(joint_in, lead)

    # bottom-up stacks; all lateral/top-down context is from step t-1
    new_conv = []
    bottom = v_in
    for l in range(depth):
        lateral = _dense_gates(state.lstm[l].h, weights[f"lat.v{l + 1}.W"],
                               spatial=True)
        if l + 1 < depth:
            top_down = dc.deconv2d(state.conv[l + 1].h,
                                   weights[f"td.v{l + 1}.W"],
                                   stride=CONV_STRIDE, padding=CONV_PAD)
        else:
            top_down = _dense_gates(state.assoc.a, weights[f"td.v{l + 1}.W"],
                                    spatial=True)
        new_conv.append(convlstm_step(bottom, lateral, top_down, state.conv[l],
                                      weights, stride=CONV_STRIDE,
                                      padding=CONV_PAD, prefix=f"conv{l + 1}."))
        bottom = new_conv[-1].h

    new_lstm = []
    bottom = m_in
    for l in range(depth):
        lateral = _dense_gates(_flatten_map(state.conv[l].h, lead),
                               weights[f"lat.m{l + 1}.W"])
        if l + 1 < depth:
            top_down = _dense_gates(state.lstm[l + 1].h,
                                    weights[f"td.m{l + 1}.W"])
        else:
            top_down = _dense_gates(state.assoc.a, weights[f"td.m{l + 1}.W"])
        new_lstm.append(lstm_step(bottom, lateral, top_down, state.lstm[l],
                                  weights, prefix=f"lstm{l + 1}."))
        bottom = new_lstm[-1].h

    # associative layer: integrates the previous step's pathway tops
    assoc = mtrnn_step(state.assoc, z_q,
                       _flatten_map(state.conv[depth - 1].h, lead),
                       state.lstm[depth - 1].h, weights)
    pb_tilde = pb_readout(assoc.d, weights)

    # proprioceptive heads
    logits, raw_att, raw_m2 = proprio_heads(new_lstm[0].h, weights,
                                            config.joints, config.bins)
    m_net = dc.softmax(logits, axis=-1)
    if config.ablate_attention:
        att = vision.identity_attention(batch, dtype=frame_in.dtype)
    else:
        att = vision.attention_params_from_raw(raw_att)
    m2_aff = vision.m2_affine_from_raw(raw_m2)

    # visual heads
    def vhead(name):
        out = dc.deconv2d(new_conv[0].h, weights[f"vhead.{name}.W"],
                          stride=CONV_STRIDE, padding=CONV_PAD)
        b = weights[f"vhead.{name}.b"]
        return out + b.reshape(b.shape[0], 1, 1)

    v_net = vhead("net").tanh()
    g_att = vision.inverse_attend(vhead("gatt").sigmoid(), att,
                                  out_hw=state.vwm1.shape[-2:])
    g_m1 = g_att[..., 0:1, :, :]
    g_pred = g_att[..., 1:2, :, :]
    g_pair = vhead("gnet").sigmoid()
    g_m2 = g_pair[..., 0:1, :, :]
    g_net = g_pair[..., 1:2, :, :]

    # fusion and working-memory updates
    if config.ablate_vwm2:
        v_att = v_net
        vwm2_next = state.vwm2
    else:
        v_att = vision.compose_attended(g_net, v_net, state.vwm2, m2_aff)
        vwm2_next = vision.update_vwm2(state.vwm2, g_m2, v_att, m2_aff)

    if config.ablate_vwm1:
        fg = vision.inverse_attend(v_att, att, out_hw=state.vwm1.shape[-2:])
        frame = g_pred * fg + (1.0 - g_pred) * state.prev_frame
        vwm1_next = state.vwm1
    else:
        frame = vision.compose_frame(g_pred, v_att, att, state.vwm1)
        vwm1_next = vision.update_vwm1(state.vwm1, g_m1, v_att, att)

    joints = decode_joints(m_net)

    pred = StepPrediction(
        frame=frame, joint_softmax=m_net, joints=joints, att=att,
        m2_affine=m2_aff,
        masks={"g_m1": g_m1, "g_pred": g_pred, "g_m2": g_m2, "g_net": g_net},
        pb_tilde=pb_tilde)
    new_state = StepState(
        t=t, conv=new_conv, lstm=new_lstm, assoc=assoc,
        vwm1=vwm1_next, vwm2=vwm2_next,
        prev_frame=frame, prev_joint_soft=m_net, prev_att=att)
    return pred, new_state


def rollout(frames, joints, a: AdaptiveA, pb, weights, config: ModelConfig,
            mode, rng, epsilon=None):
    """Thread the step function over a sequence.

    ``frames``: observed frames [T+1, C, H, W] (index 0 is the initial frame;
    closed mode only consumes index 0). ``joints``: observed angles [T+1, J].
    ``a`` has T rows. ``epsilon`` optionally fixes the noise [T, z_dim]
    (otherwise drawn from ``rng``). Returns (predictions, sentence).
    """
    t_len = a.a_mu.shape[0]
    frames = np.asarray(frames, dtype=np.float64)
    joints = np.asarray(joints, dtype=np.float64)
    state = init_state(config, frames[0], joints[0])
    if epsilon is None:
        epsilon = rng.normal((t_len, config.z_dim))
    preds = []
    for t in range(1, t_len + 1):
        prior = prior_step(state.assoc.d, t, weights)
        mu_q, sigma_q, z_q = posterior_sample(a.a_mu[t - 1], a.a_sigma[t - 1],
                                              epsilon[t - 1])
        if mode == "open":
            inputs = {"frame": frames[t - 1],
                      "joint_soft": encode_joints(joints[t - 1], config.bins)}
        else:
            inputs = {"frame": frames[0],
                      "joint_soft": encode_joints(joints[0], config.bins)}
        pred, state = forward_step(state, inputs, z_q, pb, weights, config,
                                   mode=mode)
        pred.mu_p, pred.sigma_p = prior.mu_p, prior.sigma_p
        pred.mu_q, pred.sigma_q, pred.z_q = mu_q, sigma_q, z_q
        preds.append(pred)
    sentence = language_rollout(pb, weights)
    return preds, sentence


# -- checkpoints ---------------------------------------------------------------------

_MAGIC = b"VLCK"
_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict             # name -> np.ndarray (weights, A, PB, moments)
    epoch: int
    adam_step: int
    rng_state: dict


def save_checkpoint(path, ckpt: Checkpoint):
    config_text = ckpt.config.to_text().encode()
    digest = hashlib.sha256(config_text).digest()
    meta = json.dumps({"epoch": ckpt.epoch, "adam_step": ckpt.adam_step,
                       "rng_state": ckpt.rng_state}).encode()

    blob = io.BytesIO()
    index = []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float64)
        index.append((name, arr.shape, blob.tell()))
        blob.write(arr.astype("<f8").tobytes())

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(digest)
        for chunk in (config_text, meta):
            f.write(struct.pack("<Q", len(chunk)))
            f.write(chunk)
        f.write(struct.pack("<Q", len(index)))
        for name, shape, offset in index:
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}q", *shape))
            f.write(struct.pack("<Q", offset))
        f.write(blob.getvalue())


def load_checkpoint(path, expect_config: ModelConfig = None) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        digest = f.read(32)
        (n,) = struct.unpack("<Q", f.read(8))
        config_text = f.read(n)
        if hashlib.sha256(config_text).digest() != digest:
            raise ValueError("checkpoint config digest mismatch (corrupt file)")
        (n,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(n))
        (count,) = struct.unpack("<Q", f.read(8))
        index = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
            (offset,) = struct.unpack("<Q", f.read(8))
            index.append((name, shape, offset))
        blob = f.read()

    config = ModelConfig.from_text(config_text.decode())
    if expect_config is not None and expect_config.to_text() != config.to_text():
        raise ValueError("checkpoint config does not match the requested config")
    tensors = {}
    for name, shape, offset in index:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size,
                            offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return Checkpoint(config=config, tensors=tensors, epoch=meta["epoch"],
                      adam_step=meta["adam_step"], rng_state=meta["rng_state"])
