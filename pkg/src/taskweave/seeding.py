"""Named random-stream splitting.

Every source of randomness in the package draws from a substream addressed
by a master seed plus a tuple of names ("corpus", "samples", task name, ...).
Substreams are independent of the order in which they are created, so adding
a consumer never perturbs another consumer's draws and per-task work can run
in any order (or in parallel) without changing results.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["seed_sequence", "stream", "derive_seed"]


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(master_seed: int, *names: str) -> np.random.SeedSequence:
    """SeedSequence for the substream addressed by (master_seed, *names)."""
    key = tuple(_name_key(n) for n in names)
    return np.random.SeedSequence(master_seed, spawn_key=key)


def stream(master_seed: int, *names: str) -> np.random.Generator:
    """Fresh generator for the named substream. Same address, same draws."""
    return np.random.default_rng(seed_sequence(master_seed, *names))


def derive_seed(master_seed: int, *names: str) -> int:
    """Collapse a named substream to a single 64-bit seed (for sub-configs
    that carry their own seed field, e.g. a corpus spec)."""
    return int(seed_sequence(master_seed, *names).generate_state(1, np.uint64)[0])
