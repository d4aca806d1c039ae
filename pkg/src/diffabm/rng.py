"""Counter-based random streams.

Every draw is a pure function of (seed, channel, step, lane, position): the
generator is re-keyed per call from those values, so results do not depend on
call order, thread count, or how many draws other channels consumed. Per-agent
draws are indexed by agent id, which makes them invariant under permutation or
subsetting of the requested ids.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .errors import UsageError


class Channel(IntEnum):
    """Independent random channels; one per stochastic mechanism."""

    EXPOSURE = 0
    PROGRESSION = 1
    BEHAVIOR = 2
    VACCINE = 3
    TEST = 4
    GUMBEL = 5
    POPGEN = 6
    GRAPH = 7
    INIT = 8


_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Addressable stream: (seed, channel) keys the PRNG, (step, agent) the counter."""

    seed: int
    channel: int
    step: int = 0
    agent: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64):
            raise UsageError("seed must fit in 64 bits")
        if self.step < 0 or self.agent < 0:
            raise UsageError("step and agent must be nonnegative")

    def at(self, step: int) -> "RngStream":
        return replace(self, step=int(step))

    def lane(self, agent: int) -> "RngStream":
        return replace(self, agent=int(agent))

    def _generator(self) -> np.random.Generator:
        # step/agent occupy the high counter words, so draws within one
        # (step, agent) cell can never run into a neighboring cell's range
        bitgen = np.random.Philox(
            key=[self.seed & _MASK64, int(self.channel) & _MASK64],
            counter=[0, 0, self.agent & _MASK64, self.step & _MASK64],
        )
        return np.random.Generator(bitgen)

    def uniform(self, size=None) -> np.ndarray:
        """Uniform [0,1) draws; deterministic for this (seed, channel, step, agent)."""
        return self._generator().random(size)

    def uniform_for(self, ids: np.ndarray) -> np.ndarray:
        """One uniform per agent id, independent of the order or subset of ids.

        Agent i's draw is position i of this stream's sequence, so any two
        calls whose ids overlap agree on the shared agents.
        """
        ids = np.asarray(ids)
        if ids.size == 0:
            return np.empty(0)
        full = self._generator().random(int(ids.max()) + 1)
        return full[ids]

    def normal(self, size=None) -> np.ndarray:
        return self._generator().normal(size=size)

    def gumbel(self, size=None) -> np.ndarray:
        u = self._generator().random(size)
        return -np.log(-np.log(u + 1e-20) + 1e-20)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)


def stream(seed: int, channel: Channel, step: int = 0, agent: int = 0) -> RngStream:
    return RngStream(seed=seed, channel=channel, step=step, agent=agent)
