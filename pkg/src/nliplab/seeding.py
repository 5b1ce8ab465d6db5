"""Named-stream seed derivation.

Every random draw in the package comes from a stream addressed by a root
seed plus a tuple of string/int labels. Streams are independent of the
order in which they are created, so adding a new consumer never perturbs
the draws of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def seed_for(root: int, *labels: object) -> int:
    """Derive a 64-bit child seed for the stream named by ``labels``."""
    h = hashlib.sha256()
    h.update(int(root).to_bytes(16, "little", signed=False))
    for label in labels:
        part = str(label).encode("utf-8")
        h.update(len(part).to_bytes(4, "little"))
        h.update(part)
    return int.from_bytes(h.digest()[:8], "little") & _MASK64


def rng_for(root: int, *labels: object) -> np.random.Generator:
    """Generator seeded from the named stream."""
    return np.random.Generator(np.random.PCG64(seed_for(root, *labels)))
