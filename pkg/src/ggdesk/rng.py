"""Counter-based random streams.

Every draw is keyed by (seed, stream-id, counter words), so a given
(seed, stream) pair produces the same sequence no matter how work is
split across threads or resumed across processes.
"""

import numpy as np


class Rng:
    """Philox-backed generator keyed by (seed, stream)."""

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF

    def _gen(self, c0=0, c1=0):
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        counter = np.array([c0 & 0xFFFFFFFFFFFFFFFF, c1 & 0xFFFFFFFFFFFFFFFF, 0, 0],
                           dtype=np.uint64)
        return np.random.Generator(np.random.Philox(counter=counter, key=key))

    def at(self, *counters):
        """Fresh generator for a sub-draw, e.g. ``rng.at(step)`` or
        ``rng.at(step, sample_index)``; cheap enough to build per use."""
        c = list(counters) + [0, 0]
        return self._gen(c[0], c[1])

    def child(self, stream):
        return Rng(self.seed, stream)

    # convenience wrappers over the base (counter 0) generator

    def normal(self, shape, dtype=np.float32):
        return self._gen().standard_normal(shape, dtype=dtype)

    def uniform(self, shape, lo=0.0, hi=1.0, dtype=np.float32):
        return self._gen().uniform(lo, hi, shape).astype(dtype)

    def integers(self, lo, hi, shape=None):
        return self._gen().integers(lo, hi, size=shape)

    def permutation(self, n):
        return self._gen().permutation(n)


# fixed stream ids so independent consumers never collide
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_LATENT = 3
STREAM_CAPTION = 4
STREAM_AUG = 5
STREAM_EVAL = 6
STREAM_CALIB = 7
