"""Toy regression task and the two-expert linear mixture fitted to it.

The router is Bernoulli: ``p(z=1 | x) = sigmoid(w_r * x + b_r)``; expert j
predicts ``w_j * x + b_j``. Parameters travel as a flat vector

    [w_r, b_r, w_0, b_0, w_1, b_1]

so the optimizer and finite-difference checks need no structure. The
per-point objective ``f`` is the *negated* squared error so that every
estimator maximizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capmoe.core import STREAM_DATA, STREAM_INIT, RngStream

NUM_POINTS = 100
NUM_EXPERTS = 2
NOISE_STD = 0.1
INIT_EXPERT_STD = 0.5

ROUTER = slice(0, 2)
EXPERTS = slice(2, 6)
NUM_PARAMS = 6


def target_fn(x):
    """Piecewise-linear target; ``x = 0.5`` belongs to the right segment."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0.5, 0.8 * x - 0.2, -2.0 * x + 2.0)


@dataclass(frozen=True)
class ToyDataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def gen_dataset(seed: int, n: int = NUM_POINTS) -> ToyDataset:
    rng = RngStream(seed, STREAM_DATA)
    x = 2.0 * rng.uniform_open(n) - 1.0
    y = target_fn(x) + rng.normal(0.0, NOISE_STD, n)
    return ToyDataset(x, y)


@dataclass(frozen=True)
class MoeParams:
    router: np.ndarray  # (w_r, b_r)
    experts: np.ndarray  # row j = (w_j, b_j)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.router, self.experts.ravel()])

    @classmethod
    def from_flat(cls, theta) -> "MoeParams":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[ROUTER].copy(), theta[EXPERTS].reshape(NUM_EXPERTS, 2).copy())


def init_params(seed: int) -> np.ndarray:
    """Router at zero, experts drawn from Normal(0, 0.5^2)."""
    rng = RngStream(seed, STREAM_INIT)
    return np.concatenate([np.zeros(2), rng.normal(0.0, INIT_EXPERT_STD, 4)])


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def router_input(theta, x) -> np.ndarray:
    return theta[0] * x + theta[1]


def router_prob(theta, x) -> np.ndarray:
    """``p(z=1 | x)``."""
    return _sigmoid(router_input(theta, x))


def router_probs(theta, x) -> np.ndarray:
    s = router_prob(theta, x)
    return np.stack([1.0 - s, s], axis=-1)


def router_logits(theta, x) -> np.ndarray:
    """Router log-probabilities, shape (n, 2)."""
    u = router_input(theta, x)
    return np.stack([-np.logaddexp(0.0, u), -np.logaddexp(0.0, -u)], axis=-1)


def expert_outputs(theta, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = theta[EXPERTS].reshape(NUM_EXPERTS, 2)
    return x[..., None] * w[:, 0] + w[:, 1]


def selected_output(theta, x, z) -> np.ndarray:
    out = expert_outputs(theta, x)
    z = np.asarray(z)
    if z.ndim == 1:
        return out[np.arange(z.shape[0]), z]
    out = np.broadcast_to(out, np.shape(z) + out.shape[-1:])
    return np.take_along_axis(out, np.asarray(z)[..., None], axis=-1)[..., 0]


def per_point_loss(theta, x, y, z) -> np.ndarray:
    """``f = -(y - expert_z(x))^2``; always <= 0."""
    return -(y - selected_output(theta, x, z)) ** 2


def analytic_grads(theta, x, y, z) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(d log p(z|x) / d router, d f / d (w_z, b_z))``, each ``(..., n, 2)``.

    The expert gradient is with respect to the selected expert's own pair;
    ``scatter_expert_grad`` places it into the full expert block.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z)
    sig = router_prob(theta, x)
    feat = np.stack(np.broadcast_arrays(x, np.ones_like(x)), axis=-1)
    score = (z - sig)[..., None] * feat
    resid = y - selected_output(theta, x, z)
    expert = (2.0 * resid)[..., None] * feat
    return score, expert


def scatter_expert_grad(expert_grad: np.ndarray, z: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``(1/n) sum_i weights_i * grad_i`` accumulated per expert, shape (..., k, 2)."""
    n = np.shape(z)[-1]
    oh = (np.asarray(z)[..., None] == np.arange(NUM_EXPERTS)).astype(np.float64)
    return np.einsum("...i,...ij,...ip->...jp", weights, oh, expert_grad) / n


def eval_mse(theta, data: ToyDataset, gated: bool = False) -> float:
    """Training MSE with every point routed to its most probable expert.

    ``gated`` multiplies the expert output by the router probability, which is
    the prediction the differentiable-gating model is trained to make.
    """
    probs = router_probs(theta, data.x)
    z = np.argmax(probs, axis=-1)
    pred = selected_output(theta, data.x, z)
    if gated:
        pred = pred * probs[np.arange(len(z)), z]
    return float(np.mean((data.y - pred) ** 2))


def optimal_params(sharpness: float = 200.0) -> np.ndarray:
    """The two true segments with the router switching at x = 0.5."""
    return np.array([sharpness, -0.5 * sharpness, 0.8, -0.2, -2.0, 2.0])


@dataclass
class AdamState:
    """Adam moments for a flat parameter vector; ``step`` minimizes."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 0.1) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), lr=lr)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def numeric_grad(fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    out = np.zeros_like(theta)
    for p in range(theta.size):
        e = np.zeros_like(theta)
        e[p] = h
        out[p] = (fn(theta + e) - fn(theta - e)) / (2.0 * h)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def log_router_prob(theta, x, z) -> np.ndarray:
    logits = router_logits(theta, x)
    return np.where(np.asarray(z) == 1, logits[..., 1], logits[..., 0])


def check_analytic_grads(theta, x, y, z, h: float = 1e-5) -> tuple[float, float]:
    """Relative errors of the score and expert gradients against central differences.

    Compares gradients of ``sum_i log p(z_i|x_i)`` and ``sum_i f(x_i, z_i)``
    over the full flat parameter vector, so leakage into the wrong block shows up.
    """
    theta = np.asarray(theta, dtype=np.float64)
    score, expert = analytic_grads(theta, x, y, z)
    ana_score = np.zeros(NUM_PARAMS)
    ana_score[ROUTER] = score.sum(axis=0)
    ana_f = np.zeros(NUM_PARAMS)
    ana_f[EXPERTS] = scatter_expert_grad(expert, z, np.ones(len(x))).ravel() * len(x)
    num_score = numeric_grad(lambda t: log_router_prob(t, x, z).sum(), theta, h)
    num_f = numeric_grad(lambda t: per_point_loss(t, x, y, z).sum(), theta, h)
    return relative_error(ana_score, num_score), relative_error(ana_f, num_f)
