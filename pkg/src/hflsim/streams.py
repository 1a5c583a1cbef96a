"""Named, independent random streams derived from one root seed.

Every consumer (partitioning, delay assignment, per-device shuffling,
client sampling, ...) asks for its own stream by name, so turning one
feature on or off never shifts another feature's draws.

Streams are numpy ``Generator(PCG64)`` instances seeded through
``SeedSequence(root_seed, spawn_key=(crc32(name), *keys))``. Normal variates
come from numpy's ziggurat sampler (``Generator.standard_normal``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Streams:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def get(self, name: str, *keys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(_name_key(name), *map(int, keys)))
        return np.random.Generator(np.random.PCG64(ss))

    def device(self, name: str, device_id: int) -> np.random.Generator:
        return self.get(name, device_id)

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed})"
