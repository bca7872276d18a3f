"""Named random streams split from a single 64-bit seed."""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _purpose_key(purpose: str) -> int:
    # Python's hash() is salted per process; sha256 is stable across runs.
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for ``purpose``.

    Adding a new purpose never shifts the draws of existing ones.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & _MASK64, _purpose_key(purpose)])))
