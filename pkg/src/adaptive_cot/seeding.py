"""Deterministic seed derivation.

Every stochastic step in the pipeline derives its own seed from a global
seed plus string labels (stage name, problem id, sample index, ...), so
stages can rerun independently and per-item work is schedule-independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_rng"]

_SEP = b"\x1f"  # unit separator: labels cannot collide by concatenation


def derive_seed(root: int, *labels: object) -> int:
    """Derive a 64-bit seed from a root seed and a sequence of labels.

    Stable across processes and platforms (unlike ``hash()``).
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(_SEP)
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def derive_rng(root: int, *labels: object) -> np.random.Generator:
    """A fresh ``numpy`` generator seeded by :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(root, *labels))
