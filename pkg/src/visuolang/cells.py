"""Recurrent building blocks: a standard LSTM cell and a convolutional LSTM
cell, each accepting pre-projected lateral and top-down context in addition to
the bottom-up input.

Gate order everywhere is (input, forget, candidate, output). Lateral and
top-down context arrives already projected to gate pre-activation shape (the
model owns those projection weights) and is summed into the gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor


def init_lstm_weights(in_dim, n, rng, dtype=np.float64, prefix=""):
    """Uniform +-1/sqrt(fan_in) init; forget-gate bias starts at 1.0 to keep
    memory open over long unrolls."""
    bound_x = 1.0 / np.sqrt(max(in_dim, 1))
    bound_h = 1.0 / np.sqrt(n)
    b = np.zeros(4 * n, dtype=dtype)
    b[n:2 * n] = 1.0
    return {
        prefix + "W_x": Tensor(rng.uniform(-bound_x, bound_x, (in_dim, 4 * n), dtype), requires_grad=True),
        prefix + "W_h": Tensor(rng.uniform(-bound_h, bound_h, (n, 4 * n), dtype), requires_grad=True),
        prefix + "b": Tensor(b, requires_grad=True),
    }


def init_convlstm_weights(c_in, c, kernel, rng, dtype=np.float64, prefix="",
                          rec_kernel=3):
    fan_x = c_in * kernel * kernel
    fan_h = c * rec_kernel * rec_kernel
    b = np.zeros(4 * c, dtype=dtype)
    b[c:2 * c] = 1.0
    return {
        prefix + "W_x": Tensor(rng.uniform(-1 / np.sqrt(fan_x), 1 / np.sqrt(fan_x),
                                           (4 * c, c_in, kernel, kernel), dtype),
                               requires_grad=True),
        prefix + "W_h": Tensor(rng.uniform(-1 / np.sqrt(fan_h), 1 / np.sqrt(fan_h),
                                           (4 * c, c, rec_kernel, rec_kernel), dtype),
                               requires_grad=True),
        prefix + "b": Tensor(b, requires_grad=True),
    }


def lstm_step(bottom_up, lateral, top_down, state: LstmState, weights,
              prefix="") -> LstmState:
    """One dense LSTM step. ``lateral``/``top_down`` are pre-projected gate
    pre-activations (shape [..., 4n]) or None."""
    w_x = weights[prefix + "W_x"]
    w_h = weights[prefix + "W_h"]
    b = weights[prefix + "b"]
    n = state.h.shape[-1]
    if bottom_up.shape[-1] != w_x.shape[0]:
        raise dc.GraphError(
            f"lstm_step input dim {bottom_up.shape[-1]} != weight fan-in {w_x.shape[0]}")
    pre = dc.matmul(bottom_up, w_x) + dc.matmul(state.h, w_h) + b
    if lateral is not None:
        pre = pre + lateral
    if top_down is not None:
        pre = pre + top_down
    i = pre[..., 0 * n:1 * n].sigmoid()
    f = pre[..., 1 * n:2 * n].sigmoid()
    g = pre[..., 2 * n:3 * n].tanh()
    o = pre[..., 3 * n:4 * n].sigmoid()
    c = f * state.c + i * g
    h = o * c.tanh()
    return LstmState(h=h, c=c)


def convlstm_step(bottom_up, lateral, top_down, state: ConvLstmState, weights,
                  stride=1, padding=0, prefix="") -> ConvLstmState:
    """One convolutional LSTM step. The bottom-up conv (stride/padding given)
    maps the lower layer's spatial extent onto this layer's; the recurrent
    conv is same-size. Context terms are pre-projected [..., 4C, H, W]."""
    w_x = weights[prefix + "W_x"]
    w_h = weights[prefix + "W_h"]
    b = weights[prefix + "b"]
    c_dim = state.h.shape[-3]
    rec_pad = w_h.shape[-1] // 2
    pre = (dc.conv2d(bottom_up, w_x, stride=stride, padding=padding)
           + dc.conv2d(state.h, w_h, stride=1, padding=rec_pad)
           + b.reshape(4 * c_dim, 1, 1))
    if lateral is not None:
        pre = pre + lateral
    if top_down is not None:
        pre = pre + top_down
    if pre.shape[-2:] != state.h.shape[-2:]:
        raise dc.GraphError(
            f"convlstm_step gate extent {pre.shape[-2:]} != state extent "
            f"{state.h.shape[-2:]}")
    i = pre[..., 0 * c_dim:1 * c_dim, :, :].sigmoid()
    f = pre[..., 1 * c_dim:2 * c_dim, :, :].sigmoid()
    g = pre[..., 2 * c_dim:3 * c_dim, :, :].tanh()
    o = pre[..., 3 * c_dim:4 * c_dim, :, :].sigmoid()
    c = f * state.c + i * g
    h = o * c.tanh()
    return ConvLstmState(h=h, c=c)
