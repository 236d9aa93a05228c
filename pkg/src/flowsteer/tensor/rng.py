"""Splittable counter-based randomness.

One explicit seed drives every experiment; child streams are derived by
splitting on string/int tokens, so no global hidden state exists anywhere.
Backed by numpy's Philox counter-based bit generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _token_entropy(token) -> int:
    h = hashlib.sha256(repr(token).encode()).digest()
    return int.from_bytes(h[:8], "little")


class SplitRng:
    """A named, splittable pseudorandom stream."""

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = _path
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_token_entropy(t) for t in _path))
        self.gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *tokens) -> "SplitRng":
        """Derive an independent child stream keyed by the given tokens."""
        return SplitRng(self.seed, self._path + tuple(tokens))

    # convenience passthroughs
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def shuffle(self, x):
        self.gen.shuffle(x)

    def __repr__(self):
        return f"SplitRng(seed={self.seed}, path={self._path})"
