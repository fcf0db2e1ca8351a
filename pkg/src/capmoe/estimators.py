"""Score-function gradient estimators under expert capacity, plus differentiable gating.

Every estimator here returns an *ascent* direction for the expected per-point
objective ``E_{z ~ p}[(1/n) sum_i f(x_i, z_i)]``; the training loop hands
its negation to Adam. Weights, assignments and losses broadcast over a
leading batch axis so Monte-Carlo checks can evaluate many draws at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capmoe import model as toy
from capmoe.core import RngStream, expert_counts
from capmoe.sampling import SampleOutcome, make_proposal, realized_prob, sample_balanced, sample_independent

BASELINE_DECAY = 0.99


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class PerDatapointWeights:
    """Multipliers on the score term and on the expert-parameter term, per datapoint.

    ``mask`` marks datapoints whose loss was actually evaluated (all of them
    except points skipped for capacity).
    """

    score: np.ndarray
    value: np.ndarray
    mask: np.ndarray | None = None
    biased: bool = False

    def evaluated(self) -> np.ndarray:
        return np.ones(np.shape(self.score), dtype=bool) if self.mask is None else self.mask


@dataclass
class EmaBaseline:
    value: float = 0.0
    decay: float = BASELINE_DECAY


def update_baseline(b: EmaBaseline, batch_mean_f: float) -> EmaBaseline:
    return EmaBaseline(b.decay * b.value + (1.0 - b.decay) * float(batch_mean_f), b.decay)


@dataclass
class GradEstimate:
    router_grad: np.ndarray  # (..., 2)
    expert_grads: np.ndarray  # (..., k, 2)
    diagnostics: dict = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        lead = self.router_grad.shape[:-1]
        return np.concatenate([self.router_grad, self.expert_grads.reshape(lead + (-1,))], axis=-1)


def _ratio(p_real, q_real) -> np.ndarray:
    q_real = np.asarray(q_real, dtype=np.float64)
    if np.any(q_real <= 0):
        raise ValueError("proposal probability of a realized assignment must be positive")
    return np.asarray(p_real, dtype=np.float64) / q_real


def reinforce_weights(p_real, q_real) -> PerDatapointWeights:
    """Off-policy importance ratios ``p / q``; all ones when sampling on-policy."""
    w = _ratio(p_real, q_real)
    return PerDatapointWeights(w, w.copy())


def skip_weights(z, keep, p_real, q_real, capacity: int, k: int | None = None,
                 reweight: bool = True) -> PerDatapointWeights:
    """Weights for independent sampling followed by capacity skipping.

    A kept point on expert j is upweighted by ``n_j / min(n_j, c)``, the
    inverse of its keep probability. With ``reweight=False`` the kept points
    are instead averaged with equal weight, which is biased whenever an
    expert overflows.
    """
    z = np.asarray(z)
    keep = np.asarray(keep, dtype=bool)
    if k is None:
        k = int(z.max()) + 1
    ratio = _ratio(p_real, q_real)
    counts = expert_counts(z, k)
    n_zi = np.take_along_axis(counts, z, axis=-1)
    if reweight:
        factor = n_zi / np.minimum(n_zi, capacity)
    else:
        n = z.shape[-1]
        factor = np.broadcast_to(n / keep.sum(axis=-1, keepdims=True), z.shape)
    w = np.where(keep, factor * ratio, 0.0)
    return PerDatapointWeights(w, w.copy(), mask=keep, biased=not reweight)


GM_IW = "iw"
GM_NONE = "none"
GM_SINKHORN = "sinkhorn"


def gm_weights(outcome: SampleOutcome, p_real, mode: str = GM_IW,
               sinkhorn_probs: np.ndarray | None = None) -> PerDatapointWeights:
    """Weights for a balanced draw.

    ``iw`` divides by the conditional probability given the other points'
    noise (unbiased). ``none`` uses weight one and ``sinkhorn`` divides by the
    Sinkhorn-balanced proposal instead; both are biased.
    """
    if mode == GM_IW:
        w = _ratio(p_real, outcome.proposal_prob)
        return PerDatapointWeights(w, w.copy())
    if mode == GM_NONE:
        w = np.ones(np.shape(outcome.assignment))
        return PerDatapointWeights(w, w.copy(), biased=True)
    if mode == GM_SINKHORN:
        if sinkhorn_probs is None:
            raise ValueError("sinkhorn mode needs the balanced proposal matrix")
        w = _ratio(p_real, realized_prob(sinkhorn_probs, outcome.assignment))
        return PerDatapointWeights(w, w.copy(), biased=True)
    raise ValueError(f"unknown weighting mode {mode!r}")


def reinforce_grad(theta, data: toy.ToyDataset, z, weights: PerDatapointWeights,
                   baseline: EmaBaseline | float = 0.0) -> GradEstimate:
    """``(1/n) sum_i w_i grad log p(z_i|x_i) (f_i - b)`` plus weighted expert gradients.

    The baseline is read, not updated; the caller feeds
    ``diagnostics['mean_f']`` to ``update_baseline`` after the step.
    """
    b = baseline.value if isinstance(baseline, EmaBaseline) else float(baseline)
    z = np.asarray(z)
    n = z.shape[-1]
    f = toy.per_point_loss(theta, data.x, data.y, z)
    score, expert = toy.analytic_grads(theta, data.x, data.y, z)
    router = np.einsum("...i,...ip->...p", weights.score * (f - b), score) / n
    experts = toy.scatter_expert_grad(expert, z, weights.value)
    mask = weights.evaluated()
    mean_f = (f * mask).sum(axis=-1) / np.maximum(mask.sum(axis=-1), 1)
    est = GradEstimate(router, experts, {
        "mean_f": mean_f,
        "max_weight": np.max(weights.score, axis=-1),
        "kept": mask.sum(axis=-1),
        "biased": weights.biased,
    })
    _check_finite(est)
    return est


def _check_finite(est: GradEstimate) -> None:
    if not (np.all(np.isfinite(est.router_grad)) and np.all(np.isfinite(est.expert_grads))):
        raise NonFiniteGradientError("gradient estimate is not finite")


def balance_loss(probs: np.ndarray, z) -> tuple[float, np.ndarray]:
    """Switch-style load balance ``k * sum_j frac_j * mean_prob_j``.

    Returns the loss and its gradient with respect to the logits behind
    ``probs`` (softmax rows); the dispatch fractions are treated as constants.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, k = probs.shape
    frac = expert_counts(z, k) / n
    mean_prob = probs.mean(axis=0)
    loss = float(k * np.dot(frac, mean_prob))
    d_probs = np.broadcast_to(k * frac / n, probs.shape)
    d_logits = probs * (d_probs - (probs * d_probs).sum(axis=1, keepdims=True))
    return loss, d_logits


def router_grad_from_logits(theta, x, d_logits: np.ndarray) -> np.ndarray:
    """Chain a gradient on the (n, 2) router log-probabilities back to (w_r, b_r)."""
    sig = toy.router_prob(theta, x)
    du = d_logits[:, 0] * (-sig) + d_logits[:, 1] * (1.0 - sig)
    return np.array([np.dot(du, x), du.sum()])


def gating_grad(theta, data: toy.ToyDataset, z, iw) -> GradEstimate:
    """Ascent direction for ``-(1/n) sum_i iw_i (y_i - p(z_i|x_i) * expert_{z_i}(x_i))^2``."""
    z = np.asarray(z)
    x, y = data.x, data.y
    n = z.shape[-1]
    gate = realized_prob(toy.router_probs(theta, x), z)
    out = toy.selected_output(theta, x, z)
    resid = y - gate * out
    score, _ = toy.analytic_grads(theta, x, y, z)
    # d(-iw * resid^2) = 2 iw resid * d(gate * out)
    coef = 2.0 * np.asarray(iw) * resid
    router = np.einsum("...i,...ip->...p", coef * out * gate, score) / n
    feat = np.stack([x, np.ones_like(x)], axis=-1)
    experts = toy.scatter_expert_grad(feat, z, coef * gate)
    est = GradEstimate(router, experts, {
        "mean_f": -np.mean(resid**2, axis=-1),
        "max_weight": np.max(iw, axis=-1),
        "biased": True,
    })
    _check_finite(est)
    return est


def gating_objective(theta, data: toy.ToyDataset, z, iw) -> float:
    gate = realized_prob(toy.router_probs(theta, data.x), z)
    out = toy.selected_output(theta, data.x, z)
    return float(-np.mean(np.asarray(iw) * (data.y - gate * out) ** 2))


def gating_step(theta, data: toy.ToyDataset, tau: float, rng: RngStream, *, balanced: bool,
                use_iw: bool = True, use_sinkhorn: bool = False, balance_weight: float = 0.0,
                capacity: int | None = None) -> GradEstimate:
    """One differentiable-gating gradient.

    Routing perturbs the router log-probabilities with Gumbel noise at
    temperature ``tau``, either per point or through the balanced matching.
    """
    logits = toy.router_logits(theta, data.x)
    n, k = logits.shape
    proposal = make_proposal(logits, tau, use_sinkhorn)
    if balanced:
        outcome = sample_balanced(proposal.log_probs, 1.0, capacity or n // k, rng)
    else:
        outcome = sample_independent(proposal.log_probs, 1.0, rng)
    z = outcome.assignment
    probs = np.exp(logits)
    iw = _ratio(realized_prob(probs, z), outcome.proposal_prob) if use_iw else np.ones(n)
    est = gating_grad(theta, data, z, iw)
    if balance_weight:
        loss, d_logits = balance_loss(probs, outcome.dispatch)
        est.router_grad = est.router_grad - balance_weight * router_grad_from_logits(theta, data.x, d_logits)
        est.diagnostics["balance_loss"] = loss
    est.diagnostics["assignment"] = z
    if proposal.sinkhorn is not None:
        est.diagnostics["sinkhorn_iterations"] = proposal.sinkhorn.iterations
    return est
