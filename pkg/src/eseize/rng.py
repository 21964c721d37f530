"""Named, independently seeded random streams.

Every source of randomness in a run is drawn from a named substream of a
single master seed, so any component can be re-derived in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAM_NAMES = ("init", "shuffle", "noise", "label_sample", "corruption", "random_k")


def _key(part) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class PrngStreams:
    """Master seed fanned out into independent named substreams."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def stream(self, name: str) -> np.random.Generator:
        if name not in STREAM_NAMES:
            raise ValueError(f"unknown stream name: {name!r}")
        return self.child(name)

    def child(self, *keys) -> np.random.Generator:
        """Fresh generator for (master seed, *keys); same keys -> same stream."""
        seq = np.random.SeedSequence([self.master_seed & 0xFFFFFFFFFFFFFFFF] + [_key(k) for k in keys])
        return np.random.Generator(np.random.PCG64(seq))
