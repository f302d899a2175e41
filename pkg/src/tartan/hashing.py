"""Deterministic 64-bit hashing and seed derivation.

All hashing in the package goes through :func:`hash64`: feature bucketing,
parameter fingerprints, checkpoint checksums and the splittable RNG scheme.
The hash is BLAKE2b with an 8-byte digest, keyed by the little-endian bytes
of a 64-bit seed, so results are stable across platforms and Python runs
(unlike the built-in ``hash``).

Seed splitting: every random stream is derived from one master seed via
``derive_seed(master, *labels)``, which hashes the labels under the master
seed.  Derived seeds are plain integers, so subcommand seeds can be logged
and reproduced in isolation.
"""

from __future__ import annotations

import hashlib

MASK64 = (1 << 64) - 1


def hash64(data: bytes, seed: int = 0) -> int:
    """Hash ``data`` to an unsigned 64-bit integer under ``seed``."""
    key = (seed & MASK64).to_bytes(8, "little")
    return int.from_bytes(
        hashlib.blake2b(data, digest_size=8, key=key).digest(), "little"
    )


def derive_seed(master: int, *labels: object) -> int:
    """Derive a child seed from a master seed and a label path.

    Labels are joined with an ASCII unit separator; str() of ints is stable,
    so ``derive_seed(s, "train", step)`` is reproducible and loggable.
    """
    data = "\x1f".join(str(lab) for lab in labels).encode("utf-8")
    return hash64(data, seed=master)


def make_rng(master: int, *labels: object):
    """Seeded numpy Generator for the stream named by ``labels``."""
    import numpy as np

    return np.random.default_rng(derive_seed(master, *labels))
