"""Counter-based random streams.

Every draw is addressed by ``(seed, stream, step, index)``.  A Philox
generator is keyed by ``(seed, stream, step)`` and the particle/draw index
is the position inside that block, so the value handed to particle ``n`` at
step ``t`` does not depend on how the particles are partitioned between
workers.  Normals are produced by inverse-CDF so that each index consumes
exactly one uniform.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1

# stream tags
PROPAGATE = 1
RESAMPLE = 2
PATH_DRAW = 3
ACCEPT = 4
FORECAST = 5
INIT = 6


def stable_hash(value) -> int:
    """64-bit hash of ``str(value)`` that is stable across processes."""
    digest = hashlib.blake2b(str(value).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *keys) -> int:
    """Fold extra keys into a 64-bit seed (e.g. EM iteration, chain index)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed & _MASK64).to_bytes(8, "little"))
    for k in keys:
        h.update(b"|" + str(k).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class CounterStreams:
    """Addressable uniform / normal draws keyed by ``(seed, stream, step)``."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def generator(self, stream: int, step: int) -> np.random.Generator:
        key = np.array([self.seed, ((stream & 0xFFFF) << 48) | (step & ((1 << 48) - 1))],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniforms(self, stream: int, step: int, n: int, start: int = 0) -> np.ndarray:
        """Uniforms in (0, 1) for indices ``start .. start+n-1``."""
        g = self.generator(stream, step)
        skip, offset = divmod(start, 4)
        if skip:
            g.bit_generator.advance(skip)
        u = g.random(n + offset)[offset:]
        # random() can return exactly 0.0
        return np.where(u > 0.0, u, 2.0 ** -54)

    def normals(self, stream: int, step: int, n: int, start: int = 0) -> np.ndarray:
        return ndtri(self.uniforms(stream, step, n, start))

