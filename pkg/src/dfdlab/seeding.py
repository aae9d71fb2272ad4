"""Deterministic seed derivation.

Every stochastic choice in the library is keyed off a small integer seed plus
a few context components (a role string, an epoch number, a draw position).
Mixing them through SHA-256 gives independent, platform-stable streams without
having to hand out ranges of a single counter.
"""

from __future__ import annotations

import hashlib

_SEP = b"\x1f"


def derive_seed(*parts: int | str) -> int:
    """Return a stable 63-bit seed derived from the given components.

    Accepts ints and strings; the same tuple always yields the same seed,
    on any platform and in any process.
    """
    if not parts:
        raise ValueError("derive_seed needs at least one component")
    blob = _SEP.join(str(p).encode("utf-8") for p in parts)
    digest = hashlib.sha256(blob).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
