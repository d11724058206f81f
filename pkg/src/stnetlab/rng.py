"""Counter-based random streams.

Every stochastic component takes an explicit :class:`RngStream`. Streams are
keyed by (seed, stream id) on a Philox counter generator, so the value of the
k-th draw from a stream depends only on (seed, stream id, k) and never on what
other streams did in the meantime. ``spawn`` derives child streams with
splitmix-style mixing, which keeps per-sample randomness independent of
loader order or worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(v: int) -> int:
    v = (v + 0x9E3779B97F4A7C15) & _MASK64
    v = ((v ^ (v >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    v = ((v ^ (v >> 27)) * 0x94D049BB133111EB) & _MASK64
    return v ^ (v >> 31)


class RngStream:
    """A deterministic, splittable random stream."""

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.seed, self.stream])
        )

    def spawn(self, index: int) -> "RngStream":
        """Child stream `index`; children of distinct indices never collide."""
        return RngStream(self.seed, _splitmix64(self.stream ^ _splitmix64(index + 1)))

    # Draws delegate to the underlying generator. A fresh RngStream always
    # starts at counter 0, so draw order within a stream is reproducible.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"
