"""Balance a row-stochastic n x k matrix so every column carries n / k mass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 1000


@dataclass(frozen=True)
class SinkhornResult:
    probs: np.ndarray
    iterations: int
    residual: float
    converged: bool

    @property
    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def _residual(log_p: np.ndarray, col_target: float) -> float:
    p = np.exp(log_p)
    return float(max(np.abs(p.sum(axis=-2) - col_target).max(),
                     np.abs(p.sum(axis=-1) - 1.0).max()))


def sinkhorn_log(log_p: np.ndarray, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER) -> tuple[np.ndarray, int, float, bool]:
    """Log-domain balancing; ``-inf`` entries stay ``-inf``.

    Each iteration scales columns to sum to n/k, then rows to sum to 1, so the
    output rows are normalized. Stops once the largest marginal violation
    drops below ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    log_p = np.array(log_p, dtype=np.float64)
    n, k = log_p.shape[-2:]
    log_target = np.log(n / k)
    residual = _residual(log_p, n / k)
    it = 0
    while residual >= tol and it < max_iter:
        log_p = log_p - _logsumexp(log_p, axis=-2) + log_target
        log_p = log_p - _logsumexp(log_p, axis=-1)
        it += 1
        residual = _residual(log_p, n / k)
    return log_p, it, residual, residual < tol


def sinkhorn_balance(p: np.ndarray, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER) -> SinkhornResult:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
    log_p, it, residual, ok = sinkhorn_log(log_p, tol, max_iter)
    return SinkhornResult(np.exp(log_p), it, residual, ok)
