"""Deterministic, platform-independent random streams.

All randomness in the simulator flows through counter-based Philox
generators keyed by (seed, subkey...). A given key always yields the same
draw sequence, which is what lets the simulated server rebuild worker-side
compressor outcomes without communication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def seeded_generator(seed: int, *subkeys: int) -> np.random.Generator:
    """Philox generator for (seed, subkeys); same key -> same sequence."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(subkeys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class RngStream:
    """Identity of one compressor draw stream: (seed, worker, iteration).

    The stream is materialized lazily; every call to ``generator`` restarts
    it from counter zero, so two holders of an equal RngStream observe
    bit-identical draws.
    """

    seed: int
    worker: int
    iteration: int

    def generator(self) -> np.random.Generator:
        return seeded_generator(self.seed, self.worker, self.iteration)


def standard_normals(gen: np.random.Generator, count: int) -> np.ndarray:
    """Box-Muller normals from raw uniform doubles.

    Raw uniforms are part of the bit-generator stream contract, unlike the
    library's own normal sampler, so this stays reproducible across numpy
    versions and platforms.
    """
    pairs = (count + 1) // 2
    # 1 - U keeps the argument of log in (0, 1].
    u1 = 1.0 - gen.random(pairs)
    u2 = gen.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2),
                        radius * np.sin(2.0 * np.pi * u2)])
    return z[:count]
