"""Labeled random-stream derivation from a single master seed.

Every stage of the pipeline pulls its own generator via a (label, index)
pair, so adding a new stage never shifts the streams of existing ones.
"""

import hashlib

import numpy as np


def derive_seed(master_seed, label, index=0):
    """Return a stable 64-bit seed for (master_seed, label, index)."""
    if not isinstance(label, str) or not label:
        raise ValueError("label must be a non-empty string")
    payload = f"{int(master_seed)}|{label}|{int(index)}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master_seed, label, index=0):
    """Return a numpy Generator on the labeled stream."""
    return np.random.default_rng(derive_seed(master_seed, label, index))
