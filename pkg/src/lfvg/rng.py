"""Deterministic random-stream derivation.

Every stochastic operation in the package consumes an explicit
``numpy.random.Generator``. Streams are derived from a master seed plus a
label path, so independent parts of a run (per-video synthesis, per-pair
frame sampling, shuffling, ...) never share or race on RNG state and any
subset of the work can be reproduced in isolation.
"""

import hashlib

import numpy as np


def _as_entropy(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(*key) -> np.random.Generator:
    """Return a Generator for the stream identified by ``key``.

    ``key`` is a tuple of ints and/or strings, conventionally starting with
    the master seed, e.g. ``derive_rng(seed, "pairs", epoch, pair_index)``.
    """
    if not key:
        raise ValueError("derive_rng needs at least one key component")
    return np.random.default_rng(np.random.SeedSequence([_as_entropy(k) for k in key]))


def derive_seed(*key) -> int:
    """A stable 32-bit integer seed for the stream identified by ``key``."""
    return int(derive_rng(*key).integers(0, 2**31 - 1))
