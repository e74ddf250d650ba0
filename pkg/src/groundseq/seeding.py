"""Named deterministic RNG streams derived from a single root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 128-bit child seed for a named stream under ``root_seed``."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named stream (data, model-init, training)."""
    return np.random.default_rng(derive_seed(root_seed, name))
