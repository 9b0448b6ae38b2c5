"""Seed fan-out: one master seed derives named, isolated sub-streams.

Derivation is a SHA-256 hash of the master seed joined with the stream name
parts, so adding a consumer never perturbs existing streams.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *names) -> int:
    """Derive a 31-bit sub-seed from a master seed and a stream name."""
    key = "/".join(str(p) for p in (master, *names))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31)


def derive_rng(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
