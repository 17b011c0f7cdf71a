"""Seed derivation. Every random stream in a run is keyed off the experiment
seed plus a context path, so adding streams never perturbs existing ones."""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a sequence of ints and strings.

    Parts are joined with an explicit separator before hashing so that
    ("ab", "c") and ("a", "bc") land on different streams.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")
