"""Deterministic random streams.

Every stochastic routine in the package takes an explicit ``Rng``. A stream is
identified by ``(seed, stream_id)`` plus an optional derivation path, so the
same identifiers always reproduce the same values and distinct identifiers
give statistically independent streams (via numpy's SeedSequence machinery).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Rng:
    """A reproducible, forkable random stream.

    ``derive(*keys)`` returns an independent child stream; deriving with the
    same keys always yields the same child. The underlying generator is
    created lazily and cached, so a freshly constructed ``Rng`` with equal
    identifiers replays the identical sequence.
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()
    _gen: list = field(default_factory=list, repr=False, compare=False)

    def generator(self) -> np.random.Generator:
        if not self._gen:
            ss = np.random.SeedSequence(
                entropy=self.seed, spawn_key=(self.stream_id, *self.path)
            )
            self._gen.append(np.random.Generator(np.random.PCG64(ss)))
        return self._gen[0]

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream; same keys -> same child."""
        return Rng(self.seed, self.stream_id, self.path + tuple(keys))

    # Convenience pass-throughs; all consume from this stream's generator.
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator().normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self.generator().standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator().uniform(low, high, size)

    def poisson(self, lam, size=None):
        # numpy uses exact inversion for small means and transformed
        # rejection (PTRS-style) for large ones.
        return self.generator().poisson(lam, size)

    def integers(self, low, high=None, size=None):
        return self.generator().integers(low, high, size)

    def shuffle(self, x):
        self.generator().shuffle(x)
