"""
Deterministic pseudo random numbers. Weight initialisation and seeded
sampling both draw from splitmix64 so results are reproducible across
platforms without relying on a library generator's stream layout.

"""
import typing

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_UNIT = 1.0 / float(1 << 53)


def mix64(value: int) -> int:
    """Finalising mixer of splitmix64"""
    x = value & MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Derive an independent stream seed from ``seed`` and ``index``

    Used for per-path sampling streams and replica seeds.

    :param int seed: The session seed
    :param int index: The stream index (path index, replica number)
    :rtype: int

    """
    return mix64(mix64(seed) ^ ((index + 1) * GAMMA & MASK64))


class SplitMix64:
    """The splitmix64 generator

    Output ``i`` (zero based) is ``mix64(seed + (i + 1) * GAMMA)``, which
    lets :py:meth:`uniform_array` produce a block of the stream at once.

    :param int seed: Unsigned 64-bit seed

    """
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def __repr__(self) -> str:
        return '<SplitMix64 state={:#018x}>'.format(self.state)

    def next_u64(self) -> int:
        """Advance the stream and return the next unsigned 64-bit value"""
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def next_float(self) -> float:
        """Return a float uniformly drawn from ``[0, 1)``"""
        return (self.next_u64() >> 11) * _UNIT

    def uniform_array(self, count: int, low: float,
                      high: float) -> np.ndarray:
        """Return the next ``count`` draws mapped onto ``[low, high)``

        Equivalent to ``count`` calls of :py:meth:`next_float`, computed on
        unsigned 64-bit arrays (which wrap modulo 2**64).

        :rtype: numpy.ndarray

        """
        steps = np.arange(1, count + 1, dtype=np.uint64)
        x = np.uint64(self.state) + steps * np.uint64(GAMMA)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
        x = x ^ (x >> np.uint64(31))
        self.state = (self.state + count * GAMMA) & MASK64
        unit = (x >> np.uint64(11)).astype(np.float64) * _UNIT
        return low + (high - low) * unit

    def choice(self, weights: typing.Sequence[float]) -> int:
        """Pick an index proportionally to ``weights`` by inverse CDF"""
        draw = self.next_float() * float(sum(weights))
        running, last = 0.0, 0
        for index, weight in enumerate(weights):
            if weight <= 0:
                continue
            running += weight
            last = index
            if draw < running:
                return index
        return last
