"""Named-stream seed derivation.

All randomness in the toolkit flows from a single master seed through
named streams, so any component can be re-run in isolation with the same
draws it saw inside a full pipeline.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, stream: str) -> int:
    """Derive a 63-bit seed for a named stream from the master seed."""
    digest = hashlib.sha256(f"{master}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class SeedStream:
    """Factory of independent, reproducible numpy generators."""

    def __init__(self, master: int):
        self.master = int(master)

    def seed(self, name: str) -> int:
        return derive_seed(self.master, name)

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.seed(name))

    def child(self, name: str) -> "SeedStream":
        return SeedStream(self.seed(name))
