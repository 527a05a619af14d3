"""Seeded random number streams

All randomness in matnet goes through Rng objects. They wrap numpy's counter
based Philox bit generator, keyed by a (seed, stream) pair, so the same pair
always produces the same draws regardless of which thread uses it or how many
other streams exist. Independent child streams are derived with split().
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from matnet import tensor

_MASK64 = (1 << 64) - 1


class Rng:
    """Splittable counter-based random number generator

    :param seed: 64 bit seed
    :param stream: 64 bit stream index, different streams are independent
    """

    def __init__(self, seed: int, stream: int = 0) -> None:
        self.seed: int = int(seed) & _MASK64
        self.stream: int = int(stream) & _MASK64
        key = (self.stream << 64) | self.seed
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def split(self, child: int) -> "Rng":
        """Derive an independent generator for a numbered child

        Derivation only depends on (seed, stream, child), never on how many
        values were already drawn from this generator.
        """
        seq = np.random.SeedSequence([self.seed, self.stream, int(child) & _MASK64])
        new_seed, new_stream = seq.generate_state(2, dtype=np.uint64)
        return Rng(int(new_seed), int(new_stream))

    def normal(self, shape: Union[int, Sequence[int]]) -> np.ndarray:
        """Standard normal draws in the current default precision"""
        return self.generator.standard_normal(shape).astype(tensor.default_dtype())

    def uniform(self, shape: Union[int, Sequence[int]], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws from [low, high)"""
        return self.generator.uniform(low, high, shape).astype(tensor.default_dtype())

    def integers(self, low: int, high: int, shape: Optional[Union[int, Tuple[int, ...]]] = None):
        """Integers from [low, high)"""
        return self.generator.integers(low, high, shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        """Choose size distinct (if not replace) indices from range(n)"""
        return self.generator.choice(n, size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def bernoulli(self, probs: np.ndarray) -> np.ndarray:
        """Binary draws with the given success probabilities"""
        return (self.generator.random(np.shape(probs)) < probs).astype(tensor.default_dtype())
