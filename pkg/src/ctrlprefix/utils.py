from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream; stable across platforms and processes."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])
