"""Stable sub-seeds so each subsystem draws from its own stream."""

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))
