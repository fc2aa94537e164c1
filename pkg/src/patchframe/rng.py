"""Deterministic seed derivation.

A single global seed fans out to per-component seeds through a SHA-256
hash of the label path, so `derive_seed(seed, "attack", step)` is stable
across runs and independent of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash an arbitrary label path down to a 64-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big")


def generator(*parts) -> np.random.Generator:
    """PCG64 generator seeded from a label path."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
