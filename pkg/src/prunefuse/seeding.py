"""Deterministic seed derivation.

Python's builtin hash() is salted per process, so child seeds are derived
with crc32 over a stable repr instead. Everything downstream of a master
seed is reproducible across runs and machines.
"""

from __future__ import annotations

import zlib


def derive_seed(base: int, *parts) -> int:
    """Stable child seed from a base seed and any mix of str/int tags."""
    tag = "/".join(str(p) for p in parts)
    return (int(base) * 1_000_003 + zlib.crc32(tag.encode("utf-8"))) % (2**63)
