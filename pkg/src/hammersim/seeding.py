"""Named deterministic sub-seeds.

Every stochastic component draws from its own generator, derived from the
root seed plus a tuple of names (strings or integers).  Derivation goes
through SHA-256 so that adding a new component never shifts the streams of
existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["subseed", "generator"]


def _name_to_int(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def subseed(root: int, *names: str | int) -> np.random.SeedSequence:
    """Seed sequence for the component identified by ``names``."""
    if not isinstance(root, (int, np.integer)):
        raise ValueError(f"root seed must be an integer, got {root!r}")
    entropy = [int(root) & 0xFFFFFFFFFFFFFFFF] + [_name_to_int(n) for n in names]
    return np.random.SeedSequence(entropy)


def generator(root: int, *names: str | int) -> np.random.Generator:
    """PCG64 generator for the component identified by ``names``."""
    return np.random.Generator(np.random.PCG64(subseed(root, *names)))
