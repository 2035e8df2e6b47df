"""Keyed deterministic randomness.

Every stochastic decision in the pipeline is a pure function of a seed plus a
string key (episode id, phrase, purpose tag), so results cannot depend on
worker scheduling or call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_u64(*parts: object) -> int:
    """Hash the parts into a uniform 64-bit integer."""
    raw = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "big")


def stable_uniform(*parts: object) -> float:
    """Uniform draw in [0, 1) keyed by the parts."""
    return stable_u64(*parts) / 2**64


def stable_choice_index(n: int, *parts: object) -> int:
    """Deterministic index into a collection of size n."""
    if n <= 0:
        raise ValueError("empty collection")
    return stable_u64(*parts) % n


def stable_rng(*parts: object) -> np.random.Generator:
    """NumPy generator seeded from the parts."""
    return np.random.default_rng(stable_u64(*parts))
