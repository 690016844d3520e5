"""Deterministic random-stream derivation.

Every stochastic component draws from a numpy Generator derived from a root
seed plus a stable string path (e.g. ``("decode", instance_id, sample_idx)``).
Streams for distinct paths are independent, and the derivation never touches
Python's builtin hash(), so results are stable across processes and runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_words(path: tuple) -> list[int]:
    """Map a label path to 32-bit words via sha256 of a canonical encoding."""
    canon = "\x1f".join(str(p) for p in path)
    digest = hashlib.sha256(canon.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def derive_rng(root_seed: int, *path) -> np.random.Generator:
    """Return a Generator for ``path`` under ``root_seed``.

    The same (seed, path) pair always yields an identical stream; different
    paths yield streams that are independent for practical purposes.
    """
    seq = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, *_path_words(tuple(path))])
    return np.random.Generator(np.random.PCG64(seq))


def spawn_seed(root_seed: int, *path) -> int:
    """Derive a 32-bit child seed, for handing to components that take ints."""
    words = _path_words(tuple(path))
    return (int(root_seed) ^ words[0] ^ (words[1] << 1)) & 0x7FFFFFFF
