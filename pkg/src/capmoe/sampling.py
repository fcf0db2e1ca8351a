"""Expert assignment schemes: independent, independent-then-skip, and balanced.

All samplers accept logits of shape ``(n, k)`` and an optional leading
``batch`` of independent draws, returning arrays shaped ``batch + (n,)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from capmoe.core import RngStream, argmax_rows, check_finite, log_softmax_rows, one_hot, sample_gumbel
from capmoe.matching import balanced_batch
from capmoe.sinkhorn import DEFAULT_MAX_ITER, DEFAULT_TOL, SinkhornResult, sinkhorn_log

INDEPENDENT = "independent"
SKIP = "skip"
BALANCED = "balanced"


@dataclass
class SampleOutcome:
    assignment: np.ndarray
    proposal_prob: np.ndarray
    scheme: str
    keep: np.ndarray | None = None
    # balanced scheme only: full conditional rows and solver iteration counts
    conditionals: np.ndarray | None = None
    iterations: np.ndarray | None = None
    # per-point argmax of the same perturbed scores, before any capacity handling
    dispatch: np.ndarray | None = None


class Proposal(NamedTuple):
    log_probs: np.ndarray
    sinkhorn: SinkhornResult | None


def _realized(probs: np.ndarray, z: np.ndarray) -> np.ndarray:
    if z.ndim == 1:
        return probs[np.arange(z.shape[0]), z]
    return np.take_along_axis(probs, z[..., None], axis=-1)[..., 0]


def make_proposal(logits: np.ndarray, tau: float, use_sinkhorn: bool = False,
                  tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> Proposal:
    """Log-probabilities of the tempered proposal, optionally balanced in expectation.

    The returned matrix is what the estimators divide by, so it must be the
    same one the samples are drawn from (at temperature 1).
    """
    log_q = log_softmax_rows(logits, tau)
    if not use_sinkhorn:
        return Proposal(log_q, None)
    log_b, it, residual, ok = sinkhorn_log(log_q, tol, max_iter)
    return Proposal(log_b, SinkhornResult(np.exp(log_b), it, residual, ok))


def sample_independent(logits: np.ndarray, tau: float, rng: RngStream,
                       batch: tuple[int, ...] = ()) -> SampleOutcome:
    log_q = log_softmax_rows(logits, tau)
    n, k = log_q.shape
    z = argmax_rows(log_q + sample_gumbel(rng, n, k, batch))
    return SampleOutcome(z, realized_prob(np.exp(log_q), z), INDEPENDENT, dispatch=z)


def subsample_to_capacity(z: np.ndarray, capacity: int, rng: RngStream, k: int | None = None) -> np.ndarray:
    """Keep mask: per expert a uniformly random subset of ``min(n_j, capacity)`` points.

    Datapoints are visited in a random order and each expert keeps the first
    ``capacity`` it sees.
    """
    z = np.asarray(z)
    if k is None:
        k = int(z.max()) + 1
    keys = rng.uniform_open(z.shape)
    order = np.argsort(keys, axis=-1, kind="stable")
    z_shuffled = np.take_along_axis(z, order, axis=-1)
    oh = one_hot(z_shuffled, k)
    rank = (np.cumsum(oh, axis=-2) * oh).sum(axis=-1) - 1
    keep = np.empty(z.shape, dtype=bool)
    np.put_along_axis(keep, order, rank < capacity, axis=-1)
    return keep


def sample_skip(logits: np.ndarray, tau: float, capacity: int, rng: RngStream,
                shuffle_rng: RngStream, batch: tuple[int, ...] = ()) -> SampleOutcome:
    out = sample_independent(logits, tau, rng, batch)
    k = np.shape(logits)[-1]
    out.keep = subsample_to_capacity(out.assignment, capacity, shuffle_rng, k)
    out.scheme = SKIP
    return out


def sample_balanced(logits: np.ndarray, tau: float, capacity: int, rng: RngStream,
                    batch: tuple[int, ...] = ()) -> SampleOutcome:
    """Gumbel-Matching draw; ``proposal_prob`` holds each point's conditional probability."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scaled = check_finite(logits, "logits") / tau
    n, k = scaled.shape
    noise = sample_gumbel(rng, n, k, batch)
    z, q, iters = balanced_batch(scaled, noise, capacity)
    return SampleOutcome(z, _realized(q, z), BALANCED, conditionals=q, iterations=iters,
                         dispatch=argmax_rows(scaled + noise))


def realized_prob(probs: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``probs[..., i, z_i]`` with ``probs`` broadcast to the batch of ``z``."""
    probs = np.asarray(probs)
    z = np.asarray(z)
    if z.ndim == 1:
        return _realized(probs, z)
    return _realized(np.broadcast_to(probs, z.shape + probs.shape[-1:]), z)
