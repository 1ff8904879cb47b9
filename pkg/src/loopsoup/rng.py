"""Deterministic random-number streams.

Every stochastic task in the package draws from a stream addressed by
(master_seed, stream_id).  Streams are counter-based (Philox), so a stream's
output depends only on its address, never on how many other streams were
consumed or on which thread consumed them.  Substreams are derived by mixing
tag integers into the stream id, which keeps replica-level work reproducible
under any scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def mix64(*parts: int) -> int:
    """Mix integers into a single 64-bit value (splitmix64 finalizer chain)."""
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        z = (acc + (p & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc = z ^ (z >> 31)
    return acc


@dataclass(frozen=True)
class RngStream:
    """Address of one independent random stream."""

    master_seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        key = np.array([self.master_seed & _MASK64, self.stream_id & _MASK64],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *tags: int) -> "RngStream":
        """Derive a substream; children with distinct tags never collide."""
        return RngStream(self.master_seed, mix64(self.stream_id, *tags))
