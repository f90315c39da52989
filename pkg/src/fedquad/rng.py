"""Counter-based deterministic random streams.

Every random draw in the package comes from an RngStream: a SplitMix64
finalizer applied to ``seed + counter * GOLDEN`` (64-bit wrapping). The value
at a given (seed, counter) never depends on how earlier draws were grouped,
which makes replay and parallel-safe forking trivial: a stream is fully
described by two integers.

The compiled and pure-Python kernels evaluate the same finalizer internally
for stochastic rounding; ``raw_uniform`` exposes it for parity tests.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    """SplitMix64 output finalizer (Steele, Lea & Flood constants)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def raw_u64(seed: int, index: int) -> int:
    """The stream value at an absolute counter position."""
    return mix64((seed + (index * GOLDEN & MASK64)) & MASK64)


def raw_uniform(seed: int, index: int) -> float:
    """Uniform [0, 1) at an absolute counter position (53-bit mantissa)."""
    return (raw_u64(seed, index) >> 11) * _INV_2_53


class RngStream:
    """A seeded, counter-addressed random stream.

    State is exactly (seed, counter); counter advances by one per u64 drawn.
    ``reserve(n)`` hands out a block of counter positions for kernels that
    consume randomness positionally (stochastic rounding), keeping the stream
    replayable without threading Python calls through inner loops.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & MASK64
        self.counter = counter

    def __repr__(self):
        return f"RngStream(seed={self.seed:#018x}, counter={self.counter})"

    def next_u64(self) -> int:
        self.counter += 1
        return raw_u64(self.seed, self.counter)

    def reserve(self, n: int) -> int:
        """Claim n counter slots; returns the base (slots base+1 .. base+n)."""
        if n < 0:
            raise ValueError("cannot reserve a negative count")
        base = self.counter
        self.counter += n
        return base

    def fork(self) -> "RngStream":
        """Derive an independent child stream (one draw from this one)."""
        return RngStream(self.next_u64())

    def uniform(self) -> float:
        """Uniform [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_open(self) -> float:
        """Uniform (0, 1]; used where log/pow of the draw must not see 0."""
        return ((self.next_u64() >> 11) + 1) * _INV_2_53

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def normal(self) -> float:
        """Standard normal via Box-Muller (two u64 per value)."""
        u1 = self.uniform_open()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            z = self.next_u64()
            if z < limit:
                return z % n

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in draw order."""
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        out = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            out[i], out[j] = out[j], out[i]
        return out[:k]

    def gamma(self, shape: float) -> float:
        """Gamma(shape, 1) via Marsaglia-Tsang squeeze."""
        if shape <= 0.0:
            raise ValueError("gamma needs shape > 0")
        if shape < 1.0:
            # boost: Gamma(a) = Gamma(a+1) * U^(1/a)
            return self.gamma(shape + 1.0) * self.uniform_open() ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.uniform_open()
            if u < 1.0 - 0.0331 * x * x * x * x:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def dirichlet(self, alpha: float, n: int) -> list[float]:
        """Symmetric Dirichlet(alpha) sample of length n."""
        draws = [self.gamma(alpha) for _ in range(n)]
        total = sum(draws)
        if total <= 0.0:
            out = [0.0] * n
            out[self.randint(n)] = 1.0
            return out
        return [d / total for d in draws]
