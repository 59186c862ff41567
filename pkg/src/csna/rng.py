"""Deterministic random streams.

All randomness in the package flows through PCG64 generators derived from
a (master_seed, purpose_tag) pair, so independent components — weight
init, dropout, edge sampling, Monte Carlo trials — own disjoint streams
and reruns are bitwise reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_words(tag: str) -> list[int]:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, tag: str) -> np.random.Generator:
    """Generator for the substream identified by (seed, tag)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_tag_words(tag)])
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, tag: str) -> int:
    """Collapse (seed, tag) into a plain integer seed for a child run."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_tag_words(tag)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
