"""Deterministic seed derivation.

All randomness in a run flows from one top-level seed. Subsystems get their
own streams via labeled hashing, so adding a consumer never perturbs the
stream seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Derive a 63-bit seed from a master seed and a label path."""
    text = ":".join([str(int(master))] + [str(l) for l in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))
