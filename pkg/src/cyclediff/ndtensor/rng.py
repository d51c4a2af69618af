"""Seeded, splittable random number generation.

Every random draw in the package goes through :class:`Rng`.  The stream is
numpy's Philox counter-based generator keyed by a 64-bit seed; child streams
are keyed by ``splitmix64(seed ^ splitmix64(index + 1))`` so that splitting is
order independent and documented.
"""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .tensor import Tensor, default_dtype

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer (Steele et al.)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, index: int) -> "Rng":
        return Rng(splitmix64(self.seed ^ splitmix64(int(index) + 1)))

    def split(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    # -- draws ----------------------------------------------------------------
    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape), dtype=np.float64).astype(default_dtype())

    def normal_tensor(self, shape: Sequence[int]) -> Tensor:
        return Tensor._wrap(self.normal(shape))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, n: int, size=None):
        return self._gen.integers(0, n, size=size)

    # -- state ------------------------------------------------------------------
    def get_state(self) -> str:
        st = self._gen.bit_generator.state
        payload = {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_state(cls, text: str) -> "Rng":
        p = json.loads(text)
        rng = cls(p["seed"])
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array(p["counter"], dtype=np.uint64),
                      "key": np.array(p["key"], dtype=np.uint64)},
            "buffer": np.array(p["buffer"], dtype=np.uint64),
            "buffer_pos": p["buffer_pos"],
            "has_uint32": p["has_uint32"],
            "uinteger": p["uinteger"],
        }
        return rng
