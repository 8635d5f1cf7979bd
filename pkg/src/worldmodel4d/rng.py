"""Named random streams split from one seed.

Each subsystem draws from its own generator, keyed by name, so switching one
subsystem on or off never shifts another's sequence.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key, *map(int, extra)])))


class Streams:
    """Lazily created generators for the names used by training and sampling."""

    NAMES = ("data", "noise", "dropout", "init")

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            self._gens[name] = stream(self.seed, name)
        return self._gens[name]

    def get_state(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in sorted(self._gens.items())}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self[name].bit_generator.state = st
