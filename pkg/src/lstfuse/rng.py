"""Counter-based deterministic randomness.

Every draw is a pure function of a master seed and an ordered list of
(label, index) pairs.  Derived keys form a tree: two keys with different
label paths yield independent streams, and a key can be re-derived at any
time without consuming state.  This is what makes dropout masks, weight
init, and world generation reproducible regardless of evaluation order or
thread scheduling.

The construction is SHA-256 over the label path feeding a Philox
counter-based generator, so identical keys replay bit-identically across
platforms with IEEE-754 doubles.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RngKey:
    """Handle for one random stream: a master seed plus a derivation path."""

    seed: int
    path: tuple[tuple[str, int], ...] = field(default=())

    def child(self, label: str, index: int = 0) -> "RngKey":
        return derive(self, label, index)


def derive(key: RngKey, label: str, index: int = 0) -> RngKey:
    """Split off an independent subkey named by (label, index)."""
    return RngKey(key.seed, key.path + ((label, int(index)),))


def _generator(key: RngKey) -> np.random.Generator:
    h = hashlib.sha256()
    h.update(struct.pack("<q", key.seed))
    for label, index in key.path:
        h.update(label.encode("utf-8"))
        h.update(b"\x00")
        h.update(struct.pack("<q", index))
    philox_key = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=philox_key))


def uniform(key: RngKey, n: int) -> np.ndarray:
    """n doubles in [0, 1)."""
    return _generator(key).random(n, dtype=np.float64)


def gaussian(key: RngKey, n: int) -> np.ndarray:
    """n standard normal doubles."""
    return _generator(key).standard_normal(n, dtype=np.float64)


def bernoulli_mask(key: RngKey, n: int, p: float) -> np.ndarray:
    """Inverted-dropout mask: n values in {0, 1/(1-p)} with drop rate p.

    p must lie in [0, 1).  At p=0 the mask is exactly all ones.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop rate must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(n, dtype=np.float64)
    keep = uniform(key, n) >= p
    return keep.astype(np.float64) * (1.0 / (1.0 - p))
