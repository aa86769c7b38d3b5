"""Per-stream seed derivation.

Every random stream is seeded from ``sha256(f"{global_seed}/{label}/{index}")``
truncated to 64 bits, so streams never depend on scheduling order and there is
no unseeded entropy anywhere in a run.
"""
import hashlib

import numpy as np


def derive_seed(global_seed, label, index=0):
    digest = hashlib.sha256(f"{int(global_seed)}/{label}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(global_seed, label, index=0):
    return np.random.default_rng(derive_seed(global_seed, label, index))
