"""Labelled sub-seed derivation from one 64-bit master seed."""

import hashlib

import numpy as np


def derive_seed(master: int, label: str, index: int = 0) -> int:
    digest = hashlib.blake2b(f"{int(master)}:{label}:{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(master: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label, index))
