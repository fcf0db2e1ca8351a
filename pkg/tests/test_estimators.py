import numpy as np
import pytest

from capmoe import model as toy
from capmoe import oracle
from capmoe.core import RngStream
from capmoe.estimators import (
    GM_IW,
    GM_NONE,
    GM_SINKHORN,
    EmaBaseline,
    NonFiniteGradientError,
    PerDatapointWeights,
    balance_loss,
    gating_grad,
    gating_objective,
    gating_step,
    gm_weights,
    reinforce_grad,
    reinforce_weights,
    router_grad_from_logits,
    skip_weights,
    update_baseline,
)
from capmoe.sampling import realized_prob, sample_balanced


def _setup(seed, n=8):
    theta = oracle.random_params(RngStream(seed, 80))
    return theta, toy.gen_dataset(seed, n=n)


def test_reinforce_weights_examples():
    np.testing.assert_allclose(reinforce_weights(np.array([0.3, 0.9]), np.array([0.3, 0.9])).score, 1.0)
    np.testing.assert_allclose(reinforce_weights(np.array([0.8]), np.array([0.4])).score, 2.0)
    with pytest.raises(ValueError):
        reinforce_weights(np.array([0.5]), np.array([0.0]))


def test_skip_weights_examples():
    z = np.array([0, 1, 0, 1])
    w = skip_weights(z, np.ones(4, bool), np.full(4, 0.3), np.full(4, 0.6), 2, 2)
    np.testing.assert_allclose(w.score, 0.5)
    z = np.zeros(4, dtype=np.int64)
    keep = np.array([True, False, True, False])
    w = skip_weights(z, keep, np.full(4, 0.5), np.full(4, 0.5), 2, 2)
    np.testing.assert_allclose(w.score, [2.0, 0.0, 2.0, 0.0])
    np.testing.assert_allclose(w.value, w.score)
    assert not w.biased


def test_biased_skip_differs_on_overflow():
    z = np.array([0, 0, 0, 1, 1, 1, 1, 1])
    keep = np.array([1, 1, 1, 1, 1, 1, 1, 0], dtype=bool)
    p = np.full(8, 0.5)
    fair = skip_weights(z, keep, p, p, 4, 2)
    plain = skip_weights(z, keep, p, p, 4, 2, reweight=False)
    assert plain.biased
    np.testing.assert_allclose(plain.score[keep], 8 / 7)
    assert not np.allclose(fair.score, plain.score)
    # no overflow: both agree
    z2 = np.array([0, 1] * 4)
    np.testing.assert_allclose(skip_weights(z2, np.ones(8, bool), p, p, 4, 2).score,
                               skip_weights(z2, np.ones(8, bool), p, p, 4, 2, reweight=False).score)


def test_skipped_points_contribute_nothing():
    theta, data = _setup(1)
    z = np.zeros(8, dtype=np.int64)
    keep = np.zeros(8, dtype=bool)
    keep[:4] = True
    w = skip_weights(z, keep, np.full(8, 0.5), np.full(8, 0.5), 4, 2)
    full = reinforce_grad(theta, data, z, w, 0.3)
    sub = toy.ToyDataset(data.x[:4], data.y[:4])
    w_sub = PerDatapointWeights(w.score[:4], w.value[:4])
    part = reinforce_grad(theta, sub, z[:4], w_sub, 0.3)
    # same sums, different 1/n
    np.testing.assert_allclose(full.flat() * 8, part.flat() * 4, atol=1e-12)


def test_gm_weights_modes():
    logits = np.log(np.full((4, 2), 0.5))
    out = sample_balanced(logits, 1.0, 2, RngStream(2, 80), (5,))
    p = realized_prob(np.full((4, 2), 0.5), out.assignment)
    np.testing.assert_allclose(gm_weights(out, p, GM_IW).score, p / out.proposal_prob)
    assert gm_weights(out, p, GM_NONE).biased
    np.testing.assert_allclose(gm_weights(out, p, GM_NONE).score, 1.0)
    sh = gm_weights(out, p, GM_SINKHORN, np.full((4, 2), 0.5))
    np.testing.assert_allclose(sh.score, 1.0)
    with pytest.raises(ValueError):
        gm_weights(out, p, GM_SINKHORN)
    with pytest.raises(ValueError):
        gm_weights(out, p, "nope")


def test_gm_single_expert_weights_are_one():
    out = sample_balanced(np.zeros((3, 1)), 1.0, 3, RngStream(3, 80))
    np.testing.assert_allclose(gm_weights(out, np.ones(3)).score, 1.0)


def test_gm_average_weight_is_one():
    draws = 10**5
    out = sample_balanced(np.zeros((4, 2)), 1.0, 2, RngStream(4, 80), (draws,))
    w = gm_weights(out, realized_prob(np.full((4, 2), 0.5), out.assignment)).score
    se = w.std(axis=0) / np.sqrt(draws)
    assert np.all(np.abs(w.mean(axis=0) - 1.0) <= 3 * se)


def test_reinforce_grad_constant_reward_and_zero_weights():
    theta, data = _setup(5)
    z = (data.x > 0).astype(np.int64)
    # residual 0.25 everywhere, so f_i = -0.0625 = b
    const = toy.ToyDataset(data.x, toy.selected_output(theta, data.x, z) + 0.25)
    ones = PerDatapointWeights(np.ones(8), np.ones(8))
    est = reinforce_grad(theta, const, z, ones, -0.0625)
    np.testing.assert_allclose(est.router_grad, 0.0, atol=1e-15)
    zero = PerDatapointWeights(np.zeros(8), np.zeros(8))
    np.testing.assert_array_equal(reinforce_grad(theta, data, z, zero, 0.0).flat(), 0.0)


def test_two_expert_logit_gradient_example():
    # one datapoint, p = (0.5, 0.5), f = (1, 0): d E[f] / d a_0 = p0 (1 - p0) (f0 - f1) = 0.25
    p = np.array([0.5, 0.5])
    f = np.array([1.0, 0.0])
    exact = oracle.exact_logit_grad(p, f)
    np.testing.assert_allclose(exact[0], 0.25)
    draws = 10**5
    z = (RngStream(6, 80).uniform_open(draws) < 0.5).astype(np.int64)
    per_draw = f[z] * (np.eye(2)[z][:, 0] - p[0])
    se = per_draw.std() / np.sqrt(draws)
    assert abs(per_draw.mean() - 0.25) <= 3 * se


def test_nonfinite_gradient_raises():
    theta, data = _setup(7)
    z = np.zeros(8, dtype=np.int64)
    w = PerDatapointWeights(np.full(8, np.inf), np.ones(8))
    with pytest.raises(NonFiniteGradientError):
        reinforce_grad(theta, data, z, w, 0.0)


def test_baseline_update():
    b = update_baseline(EmaBaseline(0.0), 1.0)
    assert b.value == pytest.approx(0.01)
    assert update_baseline(EmaBaseline(0.4), 0.4).value == pytest.approx(0.4)
    b = EmaBaseline(0.0)
    for _ in range(3000):
        b = update_baseline(b, -2.0)
    assert b.value == pytest.approx(-2.0, abs=1e-10)


def test_balance_loss_examples():
    uniform = np.full((4, 2), 0.5)
    loss, _ = balance_loss(uniform, np.array([0, 1, 0, 1]))
    assert loss == pytest.approx(1.0)
    onehot = np.tile([1.0, 0.0], (4, 1))
    loss, _ = balance_loss(onehot, np.zeros(4, dtype=np.int64))
    assert loss == pytest.approx(2.0)
    # minimum over balanced splits of a 2-expert simplex grid is 1
    z = np.array([0, 1, 0, 1])
    grid = [balance_loss(np.tile([a, 1 - a], (4, 1)), z)[0] for a in np.linspace(0, 1, 101)]
    assert min(grid) == pytest.approx(1.0)


def test_balance_loss_gradient_matches_finite_differences():
    a = RngStream(8, 80).normal(0.0, 1.0, (6, 2))
    z = np.array([0, 0, 0, 0, 1, 1])

    def loss(flat):
        lg = flat.reshape(6, 2)
        p = np.exp(lg - np.logaddexp(lg[:, :1], lg[:, 1:]))
        return balance_loss(p, z)[0]

    p = np.exp(a - np.logaddexp(a[:, :1], a[:, 1:]))
    _, d = balance_loss(p, z)
    np.testing.assert_allclose(d.ravel(), toy.numeric_grad(loss, a.ravel()), atol=1e-9)


def test_router_grad_from_logits_chain_rule():
    theta, data = _setup(9)
    d = RngStream(9, 81).normal(0.0, 1.0, (8, 2))
    fn = lambda t: float((d * toy.router_logits(t, data.x)).sum())
    num = toy.numeric_grad(fn, theta)
    np.testing.assert_allclose(router_grad_from_logits(theta, data.x, d), num[:2], atol=1e-8)


def test_gating_grad_matches_objective():
    theta, data = _setup(10)
    z = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    iw = np.linspace(0.5, 2.0, 8)
    num = toy.numeric_grad(lambda t: gating_objective(t, data, z, iw), theta)
    np.testing.assert_allclose(gating_grad(theta, data, z, iw).flat(), num, atol=1e-8)


def test_gating_saturated_router_is_plain_regression():
    theta = np.array([0.0, 40.0, 0.3, -0.1, 0.7, 0.2])  # p(z=1) ~ 1
    data = toy.gen_dataset(11, n=8)
    z = np.ones(8, dtype=np.int64)
    g = gating_grad(theta, data, z, np.ones(8))
    plain = reinforce_grad(theta, data, z, PerDatapointWeights(np.zeros(8), np.ones(8)))
    np.testing.assert_allclose(g.expert_grads, plain.expert_grads, atol=1e-12)
    np.testing.assert_allclose(g.router_grad, 0.0, atol=1e-12)


def test_gating_step_on_policy_iw_is_unweighted():
    theta, data = _setup(12)
    a = gating_step(theta, data, 1.0, RngStream(12, 82), balanced=False, use_iw=True)
    b = gating_step(theta, data, 1.0, RngStream(12, 82), balanced=False, use_iw=False)
    np.testing.assert_allclose(a.flat(), b.flat(), rtol=1e-12)


def test_gating_step_balanced_with_balance_loss():
    theta, data = _setup(13)
    est = gating_step(theta, data, 1e-6, RngStream(13, 83), balanced=True, balance_weight=0.01)
    assert np.isfinite(est.flat()).all()
    assert "balance_loss" in est.diagnostics
    np.testing.assert_array_equal(np.bincount(est.diagnostics["assignment"], minlength=2), 4)


def test_baseline_does_not_move_the_mean():
    theta, data = _setup(14)
    rng_a, rng_b = RngStream(14, 84), RngStream(15, 84)
    a = oracle.check_unbiased("sample_skip_iw", theta, data, 1.0, 10**5, rng_a, baseline=0.0)
    b = oracle.check_unbiased("sample_skip_iw", theta, data, 1.0, 10**5, rng_b, baseline=10.0)
    combined = np.sqrt(a.stderr**2 + b.stderr**2)
    assert np.all(np.abs(a.mean[:2] - b.mean[:2]) <= 3 * combined[:2])


@pytest.mark.parametrize("name", oracle.UNBIASED_ESTIMATORS)
@pytest.mark.parametrize("n", [4, 8])
def test_unbiased_small(name, n):
    theta, data = _setup(20 + n, n)
    rep = oracle.check_unbiased(name, theta, data, 1.0, 10**5, RngStream(20 + n, 85))
    # components share draws; bound the max over six at a family-wise level
    assert rep.zscores.max() <= 3.5


def test_biased_skip_detected():
    theta, data = _setup(30)
    rep = oracle.check_unbiased("sample_skip", theta, data, 1.0, 10**5, RngStream(30, 86))
    assert not rep.within.all()
