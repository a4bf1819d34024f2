"""Deterministic seed derivation.

One master seed per run; every consumer derives its own stream from the
master seed and a string path like ("pretrain", "epoch", 3), so stages and
batches are reproducible independently of execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *path) -> int:
    text = "causaliv:" + str(int(master)) + ":" + ":".join(str(p) for p in path)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))
