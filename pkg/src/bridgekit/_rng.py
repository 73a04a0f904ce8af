"""Counter-based RNG stream derivation.

Every stochastic routine in the toolkit draws from a Philox bit generator
whose 128-bit key encodes (seed, stream index).  Stream i of a given seed is
therefore a pure function of (seed, i), independent of how many streams exist
or in which order they are consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Return the Generator for stream ``index`` of ``seed``."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Derive a stream from a textual label (used by the CLI sub-streams).

    The label is hashed to a 64-bit index so that distinct names give
    independent streams of the same seed.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    index = int.from_bytes(digest[:8], "little")
    return stream(seed, index)


def path_noise(seed: int, n_paths: int, n_steps: int, dim: int) -> np.ndarray:
    """Standard-normal increments, one Philox stream per path.

    Row i is drawn from stream(seed, i) and so does not depend on n_paths
    or on execution order.  Shape: (n_paths, n_steps, dim).
    """
    out = np.empty((n_paths, n_steps, dim))
    for i in range(n_paths):
        out[i] = stream(seed, i).standard_normal((n_steps, dim))
    return out
