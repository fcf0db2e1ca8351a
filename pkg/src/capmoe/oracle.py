"""Brute-force references for the solver, the estimators and the sampling schemes.

Everything here is exhaustive or closed-form and deliberately avoids the code
paths it is used to check: enumeration instead of cycle cancelling, exact
expectations instead of sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from capmoe import model as toy
from capmoe.core import RngStream, log_softmax_rows, softmax_rows
from capmoe.estimators import (
    GradEstimate,
    PerDatapointWeights,
    gm_weights,
    reinforce_grad,
    reinforce_weights,
    skip_weights,
)
from capmoe.sampling import realized_prob, sample_balanced, sample_independent, sample_skip
from capmoe.sinkhorn import sinkhorn_balance

MAX_ENUM_N = 10

UNBIASED_ESTIMATORS = ("sample", "sample_skip_iw", "gumbel_matching_iw")


def exact_grad(theta, data: toy.ToyDataset) -> GradEstimate:
    """Gradient of ``E_{z ~ p}[(1/n) sum_i f(x_i, z_i)]`` by summing over each point's experts."""
    x, y = data.x, data.y
    n = len(x)
    probs = toy.router_probs(theta, x)
    router = np.zeros(2)
    experts = np.zeros((toy.NUM_EXPERTS, 2))
    for j in range(toy.NUM_EXPERTS):
        z = np.full(n, j)
        f = toy.per_point_loss(theta, x, y, z)
        score, expert = toy.analytic_grads(theta, x, y, z)
        router += (probs[:, j] * f) @ score
        experts[j] = probs[:, j] @ expert
    return GradEstimate(router / n, experts / n)


def exact_logit_grad(probs, f) -> np.ndarray:
    """``d/da sum_j softmax(a)_j f_j`` for one datapoint: ``sum_j p_j f_j (e_j - p)``."""
    probs = np.asarray(probs, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return probs * f - probs * np.dot(probs, f)


def enumerate_balanced(n: int, k: int, c: int) -> np.ndarray:
    """Every assignment with exactly ``c`` points per expert, shape (count, n)."""
    if n > MAX_ENUM_N:
        raise ValueError(f"enumeration limited to n <= {MAX_ENUM_N}, got {n}")
    if n != k * c:
        raise ValueError("need n = k * c")
    out: list[list[int]] = []
    current = [0] * n
    room = [c] * k

    def place(i: int) -> None:
        if i == n:
            out.append(current.copy())
            return
        for j in range(k):
            if room[j]:
                room[j] -= 1
                current[i] = j
                place(i + 1)
                room[j] += 1

    place(0)
    return np.array(out, dtype=np.int64).reshape(-1, n)


def num_balanced(n: int, k: int, c: int) -> int:
    return factorial(n) // factorial(c) ** k


def assignment_values(scores: np.ndarray, assignments: np.ndarray) -> np.ndarray:
    n = scores.shape[0]
    return scores[np.arange(n), assignments].sum(axis=1)


def enumeration_optimum(scores: np.ndarray, c: int) -> tuple[float, np.ndarray]:
    n, k = scores.shape
    zs = enumerate_balanced(n, k, c)
    vals = assignment_values(scores, zs)
    best = int(np.argmax(vals))
    return float(vals[best]), zs[best]


def constrained_optima(scores: np.ndarray, c: int) -> np.ndarray:
    """``out[i, j]`` = best balanced value among assignments with ``z_i = j``."""
    n, k = scores.shape
    zs = enumerate_balanced(n, k, c)
    vals = assignment_values(scores, zs)
    out = np.full((n, k), -np.inf)
    for i in range(n):
        for j in range(k):
            out[i, j] = vals[zs[:, i] == j].max()
    return out


def gibbs_distribution(logits: np.ndarray, tau: float, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced assignments and their probabilities ``exp(sum_i a_{i z_i} / tau) / Z``."""
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    zs = enumerate_balanced(n, k, c)
    energy = assignment_values(logits, zs) / tau
    energy -= energy.max()
    w = np.exp(energy)
    return zs, w / w.sum()


def joint_to_marginals(zs: np.ndarray, probs: np.ndarray, k: int) -> np.ndarray:
    onehot = zs[..., None] == np.arange(k)
    return np.einsum("a,aij->ij", probs, onehot)


@dataclass
class MarginalReport:
    gibbs: np.ndarray
    gumbel_matching: np.ndarray
    gumbel_matching_se: np.ndarray
    sinkhorn: np.ndarray
    softmax: np.ndarray
    max_abs: dict
    tv_joint: float
    num_samples: int

    def rows(self):
        n, k = self.gibbs.shape
        for i in range(n):
            for j in range(k):
                yield (i, j, self.gibbs[i, j], self.gumbel_matching[i, j],
                       self.gumbel_matching_se[i, j], self.sinkhorn[i, j], self.softmax[i, j])


def compare_marginals(logits: np.ndarray, tau: float, c: int, num_samples: int,
                      rng: RngStream) -> MarginalReport:
    """Per-point marginals under the Gibbs law, Gumbel-Matching, Sinkhorn and plain softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    zs, pz = gibbs_distribution(logits, tau, c)
    gibbs = joint_to_marginals(zs, pz, k)

    draws = sample_balanced(logits, tau, c, rng, batch=(num_samples,)).assignment
    onehot = draws[..., None] == np.arange(k)
    gm = onehot.mean(axis=0)
    gm_se = np.sqrt(gm * (1.0 - gm) / num_samples)

    # empirical joint over the enumerated support
    code = np.ravel_multi_index(draws.T, (k,) * n)
    support = np.ravel_multi_index(zs.T, (k,) * n)
    counts = np.bincount(code, minlength=k**n)[support] / num_samples
    tv = 0.5 * float(np.abs(counts - pz).sum())

    sh = sinkhorn_balance(softmax_rows(logits, tau)).probs
    sm = softmax_rows(logits, tau)
    max_abs = {
        "gibbs_vs_gm": float(np.abs(gibbs - gm).max()),
        "sinkhorn_vs_gm": float(np.abs(sh - gm).max()),
        "softmax_vs_gm": float(np.abs(sm - gm).max()),
        "sinkhorn_vs_gibbs": float(np.abs(sh - gibbs).max()),
        "softmax_vs_gibbs": float(np.abs(sm - gibbs).max()),
    }
    return MarginalReport(gibbs, gm, gm_se, sh, sm, max_abs, tv, num_samples)


# ---------------------------------------------------------------------------
# Monte-Carlo estimator checks


def estimator_draws(name: str, theta, data: toy.ToyDataset, tau: float, num_draws: int,
                    rng: RngStream, shuffle_rng: RngStream | None = None, baseline: float = 0.0,
                    inject_bias: bool = False) -> np.ndarray:
    """Flat gradient estimates, one row per independent draw, shape (num_draws, 6)."""
    logits = toy.router_logits(theta, data.x)
    n, k = logits.shape
    c = n // k
    probs = np.exp(logits)
    batch = (num_draws,)
    if name == "sample":
        out = sample_independent(logits, tau, rng, batch)
        weights = reinforce_weights(realized_prob(probs, out.assignment), out.proposal_prob)
    elif name in ("sample_skip_iw", "sample_skip"):
        out = sample_skip(logits, tau, c, rng, shuffle_rng or rng.spawn(rng.stream + 1000), batch)
        p_real = realized_prob(probs, out.assignment)
        weights = skip_weights(out.assignment, out.keep, p_real, out.proposal_prob, c, k,
                               reweight=name == "sample_skip_iw")
        if inject_bias:
            w = np.where(out.keep, p_real / out.proposal_prob, 0.0)
            weights = PerDatapointWeights(w, w.copy(), mask=out.keep, biased=True)
    elif name == "gumbel_matching_iw":
        out = sample_balanced(logits, tau, c, rng, batch)
        weights = gm_weights(out, realized_prob(probs, out.assignment))
    else:
        raise ValueError(f"no Monte-Carlo driver for {name!r}")
    return reinforce_grad(theta, data, out.assignment, weights, baseline).flat()


@dataclass
class UnbiasednessReport:
    estimator: str
    exact: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    num_draws: int

    @property
    def zscores(self) -> np.ndarray:
        diff = self.mean - self.exact
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(diff) / self.stderr
        return np.where(self.stderr > 0, z, np.where(np.abs(diff) <= 1e-12, 0.0, np.inf))

    @property
    def within(self) -> np.ndarray:
        return self.zscores <= 3.0


def check_unbiased(name: str, theta, data: toy.ToyDataset, tau: float, num_draws: int,
                   rng: RngStream, chunk: int = 50_000, baseline: float = 0.0,
                   inject_bias: bool = False) -> UnbiasednessReport:
    """Monte-Carlo mean and standard error of an estimator against ``exact_grad``."""
    shuffle_rng = rng.spawn(rng.stream + 1000)
    total = np.zeros(toy.NUM_PARAMS)
    total_sq = np.zeros(toy.NUM_PARAMS)
    done = 0
    while done < num_draws:
        m = min(chunk, num_draws - done)
        g = estimator_draws(name, theta, data, tau, m, rng, shuffle_rng, baseline, inject_bias)
        total += g.sum(axis=0)
        total_sq += (g**2).sum(axis=0)
        done += m
    mean = total / num_draws
    var = np.maximum(total_sq / num_draws - mean**2, 0.0) * num_draws / max(num_draws - 1, 1)
    return UnbiasednessReport(name, exact_grad(theta, data).flat(), mean,
                              np.sqrt(var / num_draws), num_draws)


def random_params(rng: RngStream) -> np.ndarray:
    """Frozen parameters for estimator checks; router spread wide enough to be non-trivial."""
    return np.concatenate([rng.normal(0.0, 2.0, 1), rng.normal(0.0, 1.0, 1), rng.normal(0.0, 1.0, 4)])


def tempered_log_probs(logits: np.ndarray, tau: float) -> np.ndarray:
    return log_softmax_rows(logits, tau)
