"""Deterministic randomness plumbing.

Two regimes:

- per-node keys for genealogy simulation: every node of the family tree owns
  a 64-bit key derived from its parent's key and its birth rank, so a subtree
  can be re-simulated bit-identically from its root key alone, at any
  parallelism degree;
- per-replicate generators for Monte Carlo experiments: replicate r of a run
  seeded with s draws from Philox keyed by SeedSequence((s, r, tag)), so the
  stream never depends on worker count or scheduling.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15  # 2^64 / golden ratio, the splitmix64 increment


def splitmix64(x: int) -> int:
    """One splitmix64 scramble of a 64-bit value."""
    x = (x + GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def child_key(parent_key: int, rank: int) -> int:
    """Key of the rank-th child (0-based) of a node with the given key."""
    return splitmix64(parent_key ^ ((rank + 1) * GOLDEN & MASK64))


def root_key(seed: int) -> int:
    return splitmix64(seed & MASK64)


def node_generator(key: int) -> np.random.Generator:
    """Generator owned by one tree node; all its brood randomness comes from here."""
    return np.random.Generator(np.random.Philox(key=[key, splitmix64(key)]))


def replicate_generator(seed: int, replicate: int, *tags: int) -> np.random.Generator:
    """Independent stream for one replicate of an experiment."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, replicate) + tags))
    )
