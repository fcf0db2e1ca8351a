"""Single training runs of the toy mixture under each estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capmoe import model as toy
from capmoe.core import STREAM_SAMPLE, STREAM_SHUFFLE, RngStream
from capmoe.estimators import (
    GM_IW,
    GM_NONE,
    GM_SINKHORN,
    EmaBaseline,
    GradEstimate,
    balance_loss,
    gating_step,
    gm_weights,
    reinforce_grad,
    reinforce_weights,
    router_grad_from_logits,
    skip_weights,
    update_baseline,
)
from capmoe.sampling import make_proposal, realized_prob, sample_balanced, sample_independent, sample_skip
from capmoe.sinkhorn import sinkhorn_log

REINFORCE_ESTIMATORS = (
    "sample",
    "sample_skip",
    "sample_skip_iw",
    "gumbel_matching",
    "gumbel_matching_iw",
    "gumbel_matching_sh",
)
GATING_ESTIMATORS = ("gating", "gating_balanced")
ESTIMATORS = REINFORCE_ESTIMATORS + GATING_ESTIMATORS
BIASED = {"sample_skip", "gumbel_matching", "gumbel_matching_sh", "gating", "gating_balanced"}


@dataclass(frozen=True)
class RunSpec:
    estimator: str
    tau: float
    seed: int
    steps: int = 10_000
    lr: float = 0.1
    balance_weight: float = 0.0
    use_sinkhorn: bool = False
    use_iw: bool = True
    baseline_decay: float = 0.99
    success_threshold: float = 0.02

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class RunRecord:
    spec: RunSpec
    final_mse: float
    success: bool
    max_iw: float
    mean_skip_fraction: float
    mean_sinkhorn_iters: float
    failed: bool = False
    error: str = ""


def reinforce_step(spec: RunSpec, theta, data: toy.ToyDataset, baseline: EmaBaseline,
                   rng: RngStream, shuffle_rng: RngStream) -> GradEstimate:
    """One REINFORCE-family gradient estimate (ascent direction)."""
    logits = toy.router_logits(theta, data.x)
    n, k = logits.shape
    capacity = n // k
    probs = np.exp(logits)
    proposal = make_proposal(logits, spec.tau, spec.use_sinkhorn)
    name = spec.estimator

    if name.startswith("gumbel_matching"):
        outcome = sample_balanced(proposal.log_probs, 1.0, capacity, rng)
        p_real = realized_prob(probs, outcome.assignment)
        if name == "gumbel_matching_sh":
            if proposal.sinkhorn is not None:
                sh = proposal.sinkhorn
                sh_probs, sh_iters = sh.probs, sh.iterations
            else:
                log_b, sh_iters, _, _ = sinkhorn_log(proposal.log_probs)
                sh_probs = np.exp(log_b)
            weights = gm_weights(outcome, p_real, GM_SINKHORN if spec.use_iw else GM_NONE,
                                 sinkhorn_probs=sh_probs)
        else:
            mode = GM_IW if name == "gumbel_matching_iw" and spec.use_iw else GM_NONE
            weights = gm_weights(outcome, p_real, mode)
    else:
        if name == "sample":
            outcome = sample_independent(proposal.log_probs, 1.0, rng)
        else:
            outcome = sample_skip(proposal.log_probs, 1.0, capacity, rng, shuffle_rng)
        p_real = realized_prob(probs, outcome.assignment)
        q_real = outcome.proposal_prob if spec.use_iw else p_real
        if name == "sample":
            weights = reinforce_weights(p_real, q_real)
        else:
            weights = skip_weights(outcome.assignment, outcome.keep, p_real, q_real, capacity, k,
                                   reweight=name == "sample_skip_iw")

    z = outcome.assignment
    est = reinforce_grad(theta, data, z, weights, baseline)
    if spec.balance_weight:
        _, d_logits = balance_loss(probs, outcome.dispatch)
        est.router_grad = est.router_grad - spec.balance_weight * router_grad_from_logits(theta, data.x, d_logits)
    est.diagnostics["skip_fraction"] = 1.0 - est.diagnostics["kept"] / n
    if name == "gumbel_matching_sh":
        est.diagnostics["sinkhorn_iterations"] = sh_iters
    elif proposal.sinkhorn is not None:
        est.diagnostics["sinkhorn_iterations"] = proposal.sinkhorn.iterations
    return est


def train(spec: RunSpec) -> RunRecord:
    """Full-batch training for ``spec.steps`` Adam steps; never raises on divergence."""
    data = toy.gen_dataset(spec.seed)
    theta = toy.init_params(spec.seed)
    rng = RngStream(spec.seed, STREAM_SAMPLE)
    shuffle_rng = RngStream(spec.seed, STREAM_SHUFFLE)
    adam = toy.AdamState.zeros(theta.size, spec.lr)
    baseline = EmaBaseline(0.0, spec.baseline_decay)
    gating = spec.estimator in GATING_ESTIMATORS

    max_iw = 0.0
    skip_total = 0.0
    sinkhorn_total = 0.0
    try:
        with np.errstate(over="raise", invalid="raise"):
            for _ in range(spec.steps):
                if gating:
                    est = gating_step(theta, data, spec.tau, rng,
                                      balanced=spec.estimator == "gating_balanced",
                                      use_iw=spec.use_iw, use_sinkhorn=spec.use_sinkhorn,
                                      balance_weight=spec.balance_weight)
                else:
                    est = reinforce_step(spec, theta, data, baseline, rng, shuffle_rng)
                    baseline = update_baseline(baseline, est.diagnostics["mean_f"])
                    skip_total += est.diagnostics["skip_fraction"]
                max_iw = max(max_iw, float(est.diagnostics["max_weight"]))
                sinkhorn_total += est.diagnostics.get("sinkhorn_iterations", 0)
                theta = toy.adam_step(adam, theta, -est.flat())
        mse = toy.eval_mse(theta, data, gated=gating)
        if not np.isfinite(mse):
            raise FloatingPointError("non-finite final MSE")
    except (FloatingPointError, ValueError, RuntimeError) as exc:
        return RunRecord(spec, float("nan"), False, max_iw, skip_total / spec.steps,
                         sinkhorn_total / spec.steps, failed=True, error=f"{type(exc).__name__}: {exc}")
    return RunRecord(spec, mse, mse < spec.success_threshold, max_iw, skip_total / spec.steps,
                     sinkhorn_total / spec.steps)


def train_exact(seed: int, steps: int = 10_000, lr: float = 0.1) -> float:
    """Adam on the exact expected-objective gradient; returns the final argmax-routing MSE."""
    from capmoe.oracle import exact_grad

    data = toy.gen_dataset(seed)
    theta = toy.init_params(seed)
    adam = toy.AdamState.zeros(theta.size, lr)
    for _ in range(steps):
        theta = toy.adam_step(adam, theta, -exact_grad(theta, data).flat())
    return toy.eval_mse(theta, data)
