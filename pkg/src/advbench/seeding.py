"""Deterministic fan-out of one master seed into independent substreams.

Every stochastic component (model init, noise replicas, attack draws,
batch shuffling, ...) pulls its own counter-based generator keyed by
``(master_seed, purpose, index)``.  The key is the SHA-256 digest of the
string ``"{master_seed}/{purpose}/{index}"`` fed into a Philox bit
generator, so substreams are independent of each other and of the order
in which they are consumed: sample 7's noise never depends on whether
sample 6 was processed first.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(master_seed: int, purpose: str, index: int = 0) -> np.ndarray:
    """128-bit Philox key for the (seed, purpose, index) substream."""
    tag = f"{master_seed}/{purpose}/{index}".encode()
    digest = hashlib.sha256(tag).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


def substream(master_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent generator for one purpose-tagged substream."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, purpose, index)))


def derive_seed(master_seed: int, purpose: str, index: int = 0) -> int:
    """Derived integer seed, for components that take a seed rather than a generator."""
    tag = f"{master_seed}/{purpose}/{index}".encode()
    return int.from_bytes(hashlib.sha256(tag).digest()[:8], "little") >> 1

