"""Deterministic seed derivation.

Every random stream in a run is derived from one master seed through a
stable hash of a purpose label, so independent stages never share or
reorder draws and any stage can be reproduced in isolation.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, label: str) -> int:
    """A 63-bit seed unique to (master, label)."""
    digest = hashlib.sha256(f"{int(master)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
