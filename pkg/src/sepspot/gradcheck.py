"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(
    f: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-3
) -> list[np.ndarray]:
    """d sum(f(*arrays)) / d arrays by central differences, evaluated in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(np.sum(f(*[Tensor(x) for x in arrays]).data))
            flat[i] = orig - step
            lo = float(np.sum(f(*[Tensor(x) for x in arrays]).data))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*inputs)
    return tape.gradient(out, inputs)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradient magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_grad(
    f: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-3
) -> float:
    """Worst relative error between tape and finite-difference gradients over all inputs."""
    an = analytic_grad(f, arrays)
    nu = numerical_grad(f, arrays, step=step)
    return max(relative_error(a, n) for a, n in zip(an, nu))
