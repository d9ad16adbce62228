"""Seed derivation.

Every random stream is derived from a root seed plus a purpose tag and
integer indices, so adding a model or loss to an experiment never shifts the
streams of the others. ``derive_seed`` is the first 8 bytes (little endian)
of ``blake2b("<root>/<tag>/<i0>/<i1>...")``.
"""

import hashlib

import numpy as np


def derive_seed(root: int, tag: str, *indices: int) -> int:
    key = "/".join([str(int(root)), tag, *(str(int(i)) for i in indices)])
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng(root: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, tag, *indices))


def sample_rng(seed: int, restart: int, index: int) -> np.random.Generator:
    """Per-sample attack stream for one restart."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(restart), int(index)]))
