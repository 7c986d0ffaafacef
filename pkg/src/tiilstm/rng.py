"""Seed handling.

Every stochastic step draws from its own stream. A stream is identified by the
run seed plus a purpose label; the sub-seed is the first 8 bytes of
``blake2b(f"{seed}:{label}")`` read little-endian, which feeds numpy's PCG64.
PCG64 output is platform independent, so runs reproduce bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    if not 0 <= int(seed) <= MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    digest = hashlib.blake2b(f"{int(seed)}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, label)))
