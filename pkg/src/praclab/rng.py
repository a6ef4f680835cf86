"""Labelled, splittable random streams.

Each consumer (init noise, distractor swaps, PCGrad ordering, sampling,
data generation, ...) draws from its own Philox stream keyed by
``(seed, label)``, so adding draws in one place never shifts another.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _key(seed: int, label: str) -> int:
    h = hashlib.sha256(f"{int(seed) & (2**64 - 1)}/{label}".encode()).digest()
    return int.from_bytes(h[:16], "little")


@dataclass(frozen=True)
class RngState:
    seed: int
    label: str = "root"
    counter: int = 0

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=_key(self.seed, self.label))
        if self.counter:
            bitgen = bitgen.advance(self.counter)
        return np.random.Generator(bitgen)

    def child(self, label: str) -> "RngState":
        return RngState(self.seed, f"{self.label}/{label}", 0)


def stream(seed: int, label: str) -> np.random.Generator:
    """Fresh generator for ``label`` under ``seed``."""
    return RngState(seed, label).generator()


def derive_seed(seed: int, label: str) -> int:
    """Deterministic 63-bit sub-seed, for handing to code that wants an int."""
    return _key(seed, label) & (2**63 - 1)
