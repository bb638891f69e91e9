"""Deterministic random streams built on the splitmix64 generator.

Everything in this package that needs randomness goes through
:class:`SplitMix64` so that runs are reproducible bit-for-bit from a single
integer seed, independently of numpy's global state.  The generator is the
standard splitmix64 mixer (Steele, Lea & Flood 2014; the same routine used to
seed xoshiro/xoroshiro state):

    state  <- state + 0x9E3779B97F4A7C15          (mod 2**64)
    z      <- state
    z      <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9
    z      <- (z XOR (z >> 27)) * 0x94D049BB133111EB
    output <- z XOR (z >> 31)

All arithmetic is modulo 2**64 by design; the uint64 wraparound is the
algorithm, so the numpy overflow warning is suppressed locally.  Uniform
doubles take the top 53 bits: ``u = (output >> 11) * 2**-53`` which lies in
[0, 1).  Gaussians are produced with the Box-Muller transform on pairs of
uniforms.  Bounded integers use modulo reduction (the bias is below 2**-32
for every range used here and irrelevant next to determinism).

Independent sub-streams are derived by hashing a text tag (FNV-1a, 64-bit)
into the parent seed, so e.g. data generation and parameter init never share
a stream even when launched from the same master seed.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_U64_53 = np.float64(2.0 ** -53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 output function applied elementwise to uint64 values."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, tag: str) -> int:
    """Derive an independent stream seed from ``seed`` and a text tag.

    The tag is hashed with 64-bit FNV-1a, XORed into the seed and passed
    through the splitmix64 mixer once.  Deterministic across platforms.
    """
    h = _FNV_OFFSET
    for byte in tag.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return int(_mix64(np.uint64((seed & _MASK64) ^ h)))


class SplitMix64:
    """Stateful splitmix64 stream.

    >>> rng = SplitMix64(7)
    >>> rng.uniform(2).shape
    (2,)
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64  # python int: exact mod-2**64 bookkeeping

    def next_uint64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw 64-bit outputs as a uint64 array."""
        if n < 0:
            raise ValueError("n must be non-negative")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            out = _mix64(np.uint64(self._state) + steps)
        self._state = (self._state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1), from the top 53 bits."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * _U64_53

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """``n`` ints uniform on [lo, hi) via modulo reduction (int64)."""
        if hi <= lo:
            raise ValueError("empty integer range")
        span = np.uint64(hi - lo)
        return (self.next_uint64(n) % span).astype(np.int64) + lo

    def gaussian(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """``n`` normal deviates via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = u[:m], u[m:]
        # 1 - u1 lies in (0, 1] so the log is finite.
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mean + std * z

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle in place; returns the same list."""
        for i in range(len(items) - 1, 0, -1):
            j = int(self.integers(1, 0, i + 1)[0])
            items[i], items[j] = items[j], items[i]
        return items

    def choice(self, n_items: int) -> int:
        """One index uniform on [0, n_items)."""
        return int(self.integers(1, 0, n_items)[0])

    def spawn(self, tag: str) -> "SplitMix64":
        """Child stream seeded by this stream's seed material and ``tag``."""
        return SplitMix64(derive_seed(self._state, tag))
