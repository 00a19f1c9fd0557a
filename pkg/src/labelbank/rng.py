"""SplitMix64: a tiny counter-based generator with a fixed, portable output stream."""

from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
_TWO53 = float(1 << 53)


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def derive_seed(root: int, label: str) -> int:
    """Child seed for a named purpose; stable across runs and platforms."""
    h = int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")
    return mix64((root & MASK64) ^ h)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def u64_block(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to ``n`` calls of :meth:`next_u64`."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return _mix64_array(states)

    def random(self) -> float:
        return (self.next_u64() >> 11) / _TWO53

    def uniform_block(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return ((self.u64_block(n) >> np.uint64(11)).astype(np.float64) / _TWO53).reshape(shape)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n > 0")
        return (self.next_u64() * n) >> 64

    def normal_block(self, shape) -> np.ndarray:
        """Standard normals by Box-Muller over pairs of uniforms."""
        n = int(np.prod(shape))
        u = self.uniform_block((2, (n + 1) // 2))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * math.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def sample(self, items, m: int) -> list:
        """``m`` distinct items chosen uniformly, in draw order."""
        pool = sorted(items)
        m = min(m, len(pool))
        picked = []
        for _ in range(m):
            picked.append(pool.pop(self.randbelow(len(pool))))
        return picked
