"""Associative variational recurrent layer: prior / approximate-posterior
latents with reparameterized sampling, leaky-integrator (multiple-timescale)
deterministic dynamics, the per-step bias readout, and the analytic
diagonal-Gaussian KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class PriorStats:
    mu_p: Tensor
    sigma_p: Tensor


@dataclass
class AdaptiveA:
    """Per-sequence adaptive posterior parameters; one row per time step."""
    a_mu: Tensor      # [T, z_dim]
    a_sigma: Tensor   # [T, z_dim]

    @classmethod
    def zeros(cls, t_len, z_dim, dtype=np.float64):
        # zeros make the initial posterior (tanh(0), exp(0)) = (0, 1): the
        # t=1 prior, a neutral start for training and fresh inference alike
        return cls(
            a_mu=Tensor(np.zeros((t_len, z_dim), dtype=dtype), requires_grad=True),
            a_sigma=Tensor(np.zeros((t_len, z_dim), dtype=dtype), requires_grad=True),
        )


@dataclass
class MtrnnState:
    d: Tensor
    a: Tensor  # tanh(d), kept alongside to avoid recomputation
    tau: float


def init_pvrnn_weights(d_dim, z_dim, v_dim, m_dim, pb_dim, rng, dtype=np.float64):
    def uni(shape, fan):
        bound = 1.0 / np.sqrt(max(fan, 1))
        return Tensor(rng.uniform(-bound, bound, shape, dtype), requires_grad=True)

    return {
        "prior.W_mu": uni((d_dim, z_dim), d_dim),
        "prior.b_mu": Tensor(np.zeros(z_dim, dtype=dtype), requires_grad=True),
        "prior.W_sigma": uni((d_dim, z_dim), d_dim),
        "prior.b_sigma": Tensor(np.zeros(z_dim, dtype=dtype), requires_grad=True),
        "mtrnn.W_aa": uni((d_dim, d_dim), d_dim),
        "mtrnn.W_za": uni((z_dim, d_dim), z_dim),
        "mtrnn.W_va": uni((v_dim, d_dim), v_dim),
        "mtrnn.W_ma": uni((m_dim, d_dim), m_dim),
        "mtrnn.b": Tensor(np.zeros(d_dim, dtype=dtype), requires_grad=True),
        "pb.W": uni((d_dim, pb_dim), d_dim),
        "pb.b": Tensor(np.zeros(pb_dim, dtype=dtype), requires_grad=True),
    }


def prior_step(d_prev: Tensor, t: int, weights) -> PriorStats:
    """Prior statistics from the previous deterministic state; the first step
    is pinned to the unit Gaussian."""
    if t < 1:
        raise ValueError(f"time index must be >= 1, got {t}")
    z_dim = weights["prior.W_mu"].shape[1]
    if t == 1:
        shape = d_prev.shape[:-1] + (z_dim,)
        return PriorStats(
            mu_p=Tensor(np.zeros(shape, dtype=d_prev.dtype)),
            sigma_p=Tensor(np.ones(shape, dtype=d_prev.dtype)),
        )
    mu = (dc.matmul(d_prev, weights["prior.W_mu"]) + weights["prior.b_mu"]).tanh()
    sigma = (dc.matmul(d_prev, weights["prior.W_sigma"]) + weights["prior.b_sigma"]).exp()
    return PriorStats(mu_p=mu, sigma_p=sigma)


def posterior_sample(a_mu: Tensor, a_sigma: Tensor, epsilon):
    """Reparameterized posterior draw from per-step adaptive parameters."""
    eps = epsilon if isinstance(epsilon, Tensor) else Tensor(epsilon)
    mu_q = a_mu.tanh()
    sigma_q = a_sigma.exp()
    z_q = mu_q + sigma_q * eps
    return mu_q, sigma_q, z_q


def mtrnn_step(state: MtrnnState, z_q, v_top, m_top, weights) -> MtrnnState:
    """Leaky-integrator update of the deterministic state."""
    if state.tau < 1.0:
        raise ValueError(f"time constant must be >= 1, got {state.tau}")
    inv = 1.0 / state.tau
    drive = (dc.matmul(state.a, weights["mtrnn.W_aa"])
             + dc.matmul(z_q, weights["mtrnn.W_za"])
             + dc.matmul(v_top, weights["mtrnn.W_va"])
             + dc.matmul(m_top, weights["mtrnn.W_ma"])
             + weights["mtrnn.b"])
    d = state.d * (1.0 - inv) + drive * inv
    return MtrnnState(d=d, a=d.tanh(), tau=state.tau)


def pb_readout(d: Tensor, weights) -> Tensor:
    """Per-step parametric-bias prediction, bounded to (-1, 1)."""
    return (dc.matmul(d, weights["pb.W"]) + weights["pb.b"]).tanh()


def kl_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over all entries."""
    for name, s in (("sigma_q", sigma_q), ("sigma_p", sigma_p)):
        data = s.data if isinstance(s, Tensor) else np.asarray(s)
        if np.any(data <= 0):
            raise ValueError(f"{name} must be positive")
    mu_q, sigma_q = _wrap(mu_q), _wrap(sigma_q)
    mu_p, sigma_p = _wrap(mu_p), _wrap(sigma_p)
    var_ratio = (sigma_q / sigma_p) ** 2
    term = (sigma_p.log() - sigma_q.log()
            + (var_ratio + ((mu_q - mu_p) / sigma_p) ** 2) * 0.5
            - 0.5)
    return term.sum()


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)
