"""Deterministic derivation of per-purpose RNG seeds from one master seed."""

import hashlib


def derive_seed(master: int, purpose: str) -> int:
    """Derive an independent seed from ``master`` and a purpose string.

    The scheme is fixed and documented so runs are reproducible: the seed is
    the first 8 bytes (little-endian, sign bit cleared) of
    ``sha256(f"{master}:{purpose}")``.  Every consumer of randomness in the
    package names its own purpose string (e.g. ``"case:17"``, ``"folds"``,
    ``"train:fold0"``), so streams are independent of call order.
    """
    digest = hashlib.sha256(f"{master}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
