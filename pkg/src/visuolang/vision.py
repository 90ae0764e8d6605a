"""Visual prediction machinery: attention / inverse-attention transforms, the
second working-memory affine transform, mask-gated fusion of predicted and
remembered content, both canvas update rules, and focal error weighting.

All canvas updates are convex combinations, so pixel values stay in [0, 1]
whenever their sources do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

SCALE_MIN = 0.2
SCALE_MAX = 1.5
M2_STEP_SCALE = 0.1


@dataclass
class AttentionParams:
    """Focal window: positive scales and center coordinates in [0, 1] frame
    units. Batched variants carry a leading batch axis on every field."""
    scale_x: Tensor
    scale_y: Tensor
    center_x: Tensor
    center_y: Tensor


def identity_attention(batch=None, dtype=np.float64) -> AttentionParams:
    """Full-frame window: unit scale, centered."""
    shape = () if batch is None else (batch,)
    one = Tensor(np.ones(shape, dtype=dtype))
    half = Tensor(np.full(shape, 0.5, dtype=dtype))
    return AttentionParams(scale_x=one, scale_y=one, center_x=half, center_y=half)


def attention_params_from_raw(raw: Tensor) -> AttentionParams:
    """Map raw head outputs [..., 4] = (scale-x, scale-y, center-x, center-y
    pre-squash) onto the bounded parameterization: scales confined smoothly to
    [SCALE_MIN, SCALE_MAX], centers squashed to [0, 1]."""
    span = SCALE_MAX - SCALE_MIN
    return AttentionParams(
        scale_x=raw[..., 0].sigmoid() * span + SCALE_MIN,
        scale_y=raw[..., 1].sigmoid() * span + SCALE_MIN,
        center_x=raw[..., 2].sigmoid(),
        center_y=raw[..., 3].sigmoid(),
    )


def _rows_to_affine(r0, r1):
    # r0, r1: [..., 3] -> [..., 2, 3]
    batched = r0.ndim == 2
    if batched:
        b = r0.shape[0]
        return dc.concat([r0.reshape(b, 1, 3), r1.reshape(b, 1, 3)], axis=1)
    return dc.concat([r0.reshape(1, 3), r1.reshape(1, 3)], axis=0)


def _col(x):
    # scalar () -> [1]; batched [B] -> [B, 1]
    if x.ndim == 0:
        return x.reshape(1)
    return x.reshape(x.shape[0], 1)


def attention_affine(params: AttentionParams) -> Tensor:
    """Forward attend map: output coords scaled by s and shifted to the focal
    center, so s < 1 zooms into a window around (center_x, center_y)."""
    sx, sy = _col(params.scale_x), _col(params.scale_y)
    tx = _col(params.center_x) * 2.0 - 1.0
    ty = _col(params.center_y) * 2.0 - 1.0
    zero = Tensor(np.zeros_like(sx.data))
    r0 = dc.concat([sx, zero, tx], axis=-1)
    r1 = dc.concat([zero, sy, ty], axis=-1)
    return _rows_to_affine(r0, r1)


def inverse_attention_affine(params: AttentionParams) -> Tensor:
    if np.any(params.scale_x.data <= 0) or np.any(params.scale_y.data <= 0):
        raise ValueError("attention scale must be positive to invert")
    sx, sy = _col(params.scale_x), _col(params.scale_y)
    tx = _col(params.center_x) * 2.0 - 1.0
    ty = _col(params.center_y) * 2.0 - 1.0
    zero = Tensor(np.zeros_like(sx.data))
    r0 = dc.concat([1.0 / sx, zero, -tx / sx], axis=-1)
    r1 = dc.concat([zero, 1.0 / sy, -ty / sy], axis=-1)
    return _rows_to_affine(r0, r1)


def attend(frame: Tensor, params: AttentionParams, out_hw) -> Tensor:
    """Crop/zoom the frame into the focal window at the requested resolution."""
    return dc.grid_sample(frame, attention_affine(params), out_hw=out_hw)


def inverse_attend(patch: Tensor, params: AttentionParams, out_hw) -> Tensor:
    """Embed an attended-space patch back into the full frame; pixels outside
    the focal support are zero."""
    return dc.grid_sample(patch, inverse_attention_affine(params), out_hw=out_hw)


def m2_affine_from_raw(raw: Tensor) -> Tensor:
    """Near-identity affine for the second canvas: identity plus small tanh
    offsets, keeping per-step transforms gentle."""
    ident = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    off = raw.tanh() * M2_STEP_SCALE
    flat = off + Tensor(ident.astype(raw.dtype))
    if raw.ndim == 2:
        return flat.reshape(raw.shape[0], 2, 3)
    return flat.reshape(2, 3)


def identity_m2_affine(batch=None, dtype=np.float64) -> Tensor:
    ident = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=dtype)
    if batch is None:
        return Tensor(ident)
    return Tensor(np.broadcast_to(ident, (batch, 2, 3)).copy())


def update_vwm1(vwm1: Tensor, g_m1: Tensor, v_att: Tensor,
                params: AttentionParams) -> Tensor:
    """Gated write of the inverse-attended prediction into the full-frame
    canvas."""
    frame_hw = vwm1.shape[-2:]
    written = inverse_attend(v_att, params, frame_hw)
    return (1.0 - g_m1) * vwm1 + g_m1 * written


def update_vwm2(vwm2: Tensor, g_m2: Tensor, v_att: Tensor,
                affine_m2: Tensor) -> Tensor:
    """Gated blend of the transformed canvas with the attended prediction."""
    moved = dc.grid_sample(vwm2, affine_m2, out_hw=vwm2.shape[-2:])
    return g_m2 * moved + (1.0 - g_m2) * v_att


def compose_attended(g_net: Tensor, v_net: Tensor, vwm2: Tensor,
                     affine_m2: Tensor) -> Tensor:
    """Attended-space prediction: network output fused with transformed
    canvas-2 content."""
    moved = dc.grid_sample(vwm2, affine_m2, out_hw=vwm2.shape[-2:])
    return g_net * v_net + (1.0 - g_net) * moved


def compose_frame(g_pred: Tensor, v_att: Tensor, params: AttentionParams,
                  vwm1: Tensor) -> Tensor:
    """Full-frame prediction: inverse-attended foreground fused with the
    canvas-1 background."""
    frame_hw = vwm1.shape[-2:]
    fg = inverse_attend(v_att, params, frame_hw)
    return g_pred * fg + (1.0 - g_pred) * vwm1


def focal_weights(params: AttentionParams, n: int, alpha_s: float) -> Tensor:
    """Per-pixel error weight growing with squared distance from the focal
    center; zero exactly at the center."""
    if alpha_s <= 0:
        raise ValueError("alpha_s must be positive")
    grid = np.arange(n, dtype=np.float64) / n
    gi = Tensor(np.broadcast_to(grid[:, None], (n, n)).copy())
    gj = Tensor(np.broadcast_to(grid[None, :], (n, n)).copy())
    cx, cy = params.center_x, params.center_y
    if cx.ndim == 1:  # batched: [B] -> [B, 1, 1]
        cx = cx.reshape(cx.shape[0], 1, 1)
        cy = cy.reshape(cy.shape[0], 1, 1)
    return ((cx - gi) ** 2 + (cy - gj) ** 2) * alpha_s
