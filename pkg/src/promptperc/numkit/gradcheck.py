"""Central finite-difference checks against reverse-mode gradients (float64)."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward


def rel_error(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    rng: np.random.Generator,
    h: float = 1e-4,
    groups: Mapping[str, Sequence[str]] | None = None,
) -> dict[str, float]:
    """Compare <grad, v> with (f(p + h v) - f(p - h v)) / 2h.

    ``v`` is a random unit direction spanning one group of parameters, so
    every entry contributes.  Without ``groups`` each tensor is its own group.
    Returns the relative error per group name.
    """
    if groups is None:
        groups = {n: [n] for n in params}
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("gradient checks must run in float64")
        p.grad = None
        p.requires_grad = True
    loss = loss_fn()
    backward(loss)
    analytic = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for n, p in params.items()}
    errors = {}
    for gname, names in groups.items():
        dirs = {n: rng.standard_normal(params[n].shape) for n in names}
        norm = np.sqrt(sum(float((v * v).sum()) for v in dirs.values()))
        base = {n: params[n].data for n in names}

        def shifted(step):
            for n in names:
                params[n].data = base[n] + step * dirs[n] / norm
            return loss_fn().item()

        fd = (shifted(h) - shifted(-h)) / (2 * h)
        for n in names:
            params[n].data = base[n]
        errors[gname] = rel_error(fd, sum(float((analytic[n] * dirs[n]).sum()) for n in names) / norm)
    for p in params.values():
        p.grad = None
    return errors


def elementwise_fd(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Full central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
