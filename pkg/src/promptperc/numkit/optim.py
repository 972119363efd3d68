"""Adam with an update mask, and the warmup + poly learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    mask: Iterable[str] | None = None,
) -> AdamState:
    """One bias-corrected Adam update.

    Only names in ``mask`` (all names when ``mask`` is None) are touched; every
    other parameter and its moment buffers are left exactly as they were.
    Parameter arrays are replaced, not written in place.
    """
    names = list(params) if mask is None else [n for n in params if n in set(mask)]
    for name in names:
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {name} {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        t = state.t.get(name, 0) + 1
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * (g * g)
        mhat = m / dt(1 - beta1 ** t)
        vhat = v / dt(1 - beta2 ** t)
        p.data = p.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
        state.m[name], state.v[name], state.t[name] = m, v, t
    return state


def poly_lr(it: int, warmup_iters: int, total_iters: int, base_lr: float,
            power: float = 0.9) -> float:
    """Linear warmup to ``base_lr`` followed by polynomial decay to zero."""
    if total_iters <= warmup_iters:
        raise ValueError("total_iters must exceed warmup_iters")
    if not 0 <= it <= total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters}]")
    if warmup_iters > 0 and it < warmup_iters:
        return base_lr * it / warmup_iters
    frac = (it - warmup_iters) / (total_iters - warmup_iters)
    return base_lr * (1.0 - frac) ** power
