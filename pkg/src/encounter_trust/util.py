"""Small shared helpers: deterministic seed derivation and percentage shares."""

from __future__ import annotations

import hashlib
import math
from fractions import Fraction


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of printable parts.

    Uses blake2b so derived streams do not depend on the process hash seed
    or on platform int hashing.
    """
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def share_size(count: int, percent: float) -> int:
    """Number of items in the top `percent` share of `count` items, rounded up.

    Exact rational arithmetic: share_size(10, 40) is 4, never 5 from float dust.
    """
    if not 0 <= percent <= 100:
        raise ValueError(f"percent must be in [0, 100], got {percent}")
    if count <= 0:
        return 0
    p = float(percent)
    frac = Fraction(int(p)) if p.is_integer() else Fraction(str(p))
    return math.ceil(frac * count / 100)
