"""Shared numerics: seeded random streams, Gumbel noise and row-wise softmax.

Matrices are plain ``numpy`` arrays. A logit matrix has shape ``(n, k)``
(datapoints by experts); an assignment is an integer vector of length ``n``
with entries in ``[0, k)``. Most helpers broadcast over leading batch axes.
"""

from __future__ import annotations

import numpy as np

EULER_GAMMA = 0.5772156649015329

_TWO_POW_53 = float(2**53)

# Purpose ids for RngStream; keeps data, init and sampling draws independent.
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_SAMPLE = 2
STREAM_SHUFFLE = 3
STREAM_EVAL = 4


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Two streams with the same key produce bit-identical draws. Each stream
    owns its generator; do not share one between concurrent tasks.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"

    def uniform_open(self, shape) -> np.ndarray:
        """Uniforms on the open interval (0, 1)."""
        bits = self.generator.integers(0, 2**53, size=shape, dtype=np.int64)
        return (bits + 0.5) / _TWO_POW_53

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def spawn(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def sample_gumbel(rng: RngStream, n: int, k: int, batch: tuple[int, ...] = ()) -> np.ndarray:
    """Standard Gumbel noise of shape ``batch + (n, k)``; always finite."""
    if n < 1 or k < 1:
        raise ValueError(f"need n, k >= 1, got n={n}, k={k}")
    return gumbel_from_uniform(rng.uniform_open(tuple(batch) + (n, k)))


def check_finite(a: np.ndarray, name: str = "input") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def log_softmax_rows(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = check_finite(logits, "logits") / tau
    a = a - a.max(axis=-1, keepdims=True)
    return a - np.log(np.exp(a).sum(axis=-1, keepdims=True))


def softmax_rows(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise ``exp(a_ij / tau) / sum_j exp(a_ij / tau)``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = check_finite(logits, "logits") / tau
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def argmax_rows(scores: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(scores), axis=-1)


def one_hot(z: np.ndarray, k: int) -> np.ndarray:
    z = np.asarray(z)
    return (z[..., None] == np.arange(k)).astype(np.float64)


def expert_counts(z: np.ndarray, k: int) -> np.ndarray:
    """Per-expert counts ``n_j`` along the last axis of ``z``."""
    return one_hot(z, k).sum(axis=-2)


def is_balanced(z: np.ndarray, k: int, capacity: int) -> bool:
    return bool(np.all(expert_counts(z, k) == capacity))


def capacity_for(n: int, k: int) -> int:
    if n % k:
        raise ValueError(f"n={n} is not divisible by k={k}")
    return n // k
