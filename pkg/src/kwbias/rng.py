"""Seeded, splittable randomness.

Every random draw in the package flows through `stream`, which derives an
independent PCG64 generator from a root seed plus a label path.  Streams
with different labels never interact, so components can be reordered or
parallelized without changing each other's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *labels: object) -> np.random.Generator:
    """Return a generator keyed by (seed, labels), stable across runs."""
    tag = "/".join(str(l) for l in labels)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])
    return np.random.Generator(np.random.PCG64(ss))
