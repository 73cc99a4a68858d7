"""Deterministic derivation of child seeds from a single run seed.

Every stochastic component (data generation, model init, batch order,
critic re-init, clustering) draws its own child seed so that one integer
fully determines a run, independent of call order or process.
"""

import hashlib


def child_seed(root: int, *tags: object) -> int:
    """Derive a stable 63-bit seed from a root seed and a tag path."""
    key = ":".join([str(int(root))] + [str(t) for t in tags])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") & 0x7FFF_FFFF_FFFF_FFFF
