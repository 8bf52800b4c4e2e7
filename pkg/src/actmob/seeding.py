"""Deterministic seed derivation.

All randomness flows from one root seed. Stage- and user-level
sub-seeds are derived by hashing the stage name and key with SHA-256,
so results never depend on process hash randomization, corpus ordering,
or worker scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, stage: str, key: str = "") -> int:
    digest = hashlib.sha256(f"{stage}|{key}".encode()).digest()
    word = int.from_bytes(digest[:8], "little")
    return (int(root) ^ word) & 0x7FFF_FFFF_FFFF_FFFF


def derive_rng(root: int, stage: str, key: str = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage, key))
