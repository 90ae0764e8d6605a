"""Central finite-difference gradient checking for diffcore graphs."""

from __future__ import annotations

import numpy as np

from .diffcore import Rng, Tensor, backward

__all__ = ["check_gradients"]


def check_gradients(fn, inputs, epsilon=1e-6, max_coords=10_000, seed=0):
    """Compare reverse-mode gradients of ``fn(*inputs)`` against central
    differences and return the maximum relative error.

    ``fn`` must return a Tensor; non-scalar outputs are contracted with a
    fixed random cotangent so a scalar objective is checked. Every coordinate
    of every input is perturbed, or a seeded random subset when the total
    coordinate count exceeds ``max_coords``.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError("epsilon must be in (0, 1e-2]")
    inputs = list(inputs)
    for x in inputs:
        if not np.all(np.isfinite(x.data)):
            raise ValueError("inputs must be finite")

    rng = Rng(seed)

    def objective():
        out = fn(*inputs)
        if out.shape == ():
            return out
        cot = Tensor(objective.cotangent)
        return (out * cot).sum()

    probe = fn(*inputs)
    objective.cotangent = (rng.normal(probe.shape) if probe.shape != () else None)

    for x in inputs:
        x.requires_grad = True
        x.zero_grad()
    loss = objective()
    backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
                for x in inputs]
    for x in inputs:
        x.zero_grad()

    total = sum(x.size for x in inputs)
    coords = []
    for i, x in enumerate(inputs):
        coords.extend((i, j) for j in range(x.size))
    if total > max_coords:
        pick = rng.integers(0, total, shape=max_coords)
        coords = [coords[k] for k in sorted(set(int(p) for p in pick))]

    max_err = 0.0
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        f_plus = objective().item()
        flat[j] = orig - epsilon
        f_minus = objective().item()
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        if err > max_err:
            max_err = err
    return max_err
