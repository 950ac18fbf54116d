"""Deterministic random streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def _label(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode())


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for the stream identified by (seed, *labels).

    Labels may be strings (purposes such as "chain") or integers (indices).
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFF] + [_label(x) for x in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *labels) -> int:
    return int(derive_rng(seed, "seed", *labels).integers(0, 2**31 - 1))
