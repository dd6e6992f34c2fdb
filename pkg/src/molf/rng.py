"""Deterministic pseudo-random numbers for every stochastic piece of the toolkit.

The generator is xoshiro256** seeded through splitmix64, so a 64-bit seed
expands to the full 256-bit state and identical seeds replay identical draw
sequences.  Gaussians come from Box-Muller applied to consecutive uniform
pairs; both outputs of each pair are consumed in order (the second is
carried over to the next request), so the gaussian stream is a pure
function of the seed and the sequence of request sizes.

The raw 64-bit and uniform streams are exact integer/IEEE arithmetic and
therefore bit-portable; gaussian draws additionally go through libm
log/cos/sin and are reproducible for a fixed numpy build.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend
from .errors import ContractError

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 2.0 ** -53


def _splitmix64_state(seed: int) -> list[int]:
    x = seed & _MASK64
    words = []
    for _ in range(4):
        x = (x + _SPLITMIX_GAMMA) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        words.append(z ^ (z >> 31))
    if not any(words):  # xoshiro must never start from the all-zero state
        words[0] = _SPLITMIX_GAMMA
    return words


class Rng:
    """Seeded xoshiro256** stream with uniform and gaussian views."""

    __slots__ = ("_state", "_carry")

    def __init__(self, seed: int):
        self._state = np.array(_splitmix64_state(int(seed)), dtype=np.uint64)
        self._carry: float | None = None

    # -- raw stream ------------------------------------------------------

    def raw(self, n: int) -> np.ndarray:
        if n < 0:
            raise ContractError(f"draw count must be >= 0, got {n}")
        out = np.empty(n, dtype=np.uint64)
        backend.fill_u64(self._state, out)
        return out

    def next_u64(self) -> int:
        return int(self.raw(1)[0])

    # -- distributions ----------------------------------------------------

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1): the top 53 bits of each raw draw."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def gaussians(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        i = 0
        if self._carry is not None and n > 0:
            out[0] = self._carry
            self._carry = None
            i = 1
        need = n - i
        if need > 0:
            pairs = (need + 1) // 2
            u = self.uniforms(2 * pairs)
            # log1p(-u1) = log(1 - u1) stays finite because u1 < 1
            r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
            theta = _TWO_PI * u[1::2]
            z = np.empty(2 * pairs, dtype=np.float64)
            z[0::2] = r * np.cos(theta)
            z[1::2] = r * np.sin(theta)
            out[i:] = z[:need]
            if need % 2 == 1:
                self._carry = float(z[need])
        return out

    def gaussian_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.gaussians(rows * cols).reshape(rows, cols)

    def uniform_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.uniforms(rows * cols).reshape(rows, cols)

    def dropout_mask(self, rows: int, cols: int, rate: float) -> np.ndarray:
        """Inverted-dropout mask: entries are 0 or 1/(1-rate), drawn entrywise."""
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        u = self.uniform_matrix(rows, cols)
        return (u >= rate).astype(np.float64) * (1.0 / (1.0 - rate))

    # -- state round-trip --------------------------------------------------

    def get_state(self) -> tuple[int, int, int, int, float | None]:
        s = self._state
        return (int(s[0]), int(s[1]), int(s[2]), int(s[3]), self._carry)

    def set_state(self, state: tuple[int, int, int, int, float | None]) -> None:
        s0, s1, s2, s3, carry = state
        self._state = np.array([s0, s1, s2, s3], dtype=np.uint64)
        self._carry = None if carry is None else float(carry)

    @classmethod
    def from_state(cls, state: tuple[int, int, int, int, float | None]) -> "Rng":
        rng = cls(0)
        rng.set_state(state)
        return rng
