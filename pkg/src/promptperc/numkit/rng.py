"""Named, splittable counter-based random streams (Philox).

A stream is identified by a root seed plus a path of names, e.g.
``stream(7, "episodes", 12)``.  The same path always yields the same
sequence regardless of which other streams were consumed first.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, names: tuple) -> int:
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode())
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, names)))


def split(gen: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams from ``gen`` (advances ``gen``)."""
    seeds = gen.integers(0, 2**63 - 1, size=n)
    return [np.random.Generator(np.random.Philox(key=int(s))) for s in seeds]


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def from_state(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)
