import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capmoe.core import RngStream, sample_gumbel, softmax_rows
from capmoe.matching import solve_gumbel_matching
from capmoe.sinkhorn import sinkhorn_balance, sinkhorn_log


def _random_rows(seed, n, k, scale=1.0):
    return softmax_rows(RngStream(seed, 60).normal(0.0, scale, (n, k)))


def test_uniform_is_fixed_point():
    res = sinkhorn_balance(np.full((6, 3), 1 / 3))
    assert res.iterations == 0 and res.converged
    np.testing.assert_allclose(res.probs, 1 / 3)


def test_identical_rows_become_uniform():
    res = sinkhorn_balance(np.array([[0.9, 0.1], [0.9, 0.1]]))
    np.testing.assert_allclose(res.probs, 0.5, atol=1e-6)


def test_random_small_marginals():
    tol = 1e-6
    res = sinkhorn_balance(_random_rows(1, 4, 2), tol)
    assert res.converged and res.residual < tol
    np.testing.assert_allclose(res.probs.sum(axis=0), 2.0, atol=tol)
    np.testing.assert_allclose(res.probs.sum(axis=1), 1.0, atol=1e-12)


def test_idempotent():
    once = sinkhorn_balance(_random_rows(2, 10, 5), 1e-9).probs
    twice = sinkhorn_balance(once, 1e-6).probs
    assert np.abs(twice - once).max() <= 1e-6


def test_support_preserved():
    p = np.array([[0.7, 0.3, 0.0], [0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
    out = sinkhorn_balance(p).probs
    assert out[0, 2] == 0.0
    assert np.all(out[p > 0] > 0)


def test_non_convergence_flag():
    res = sinkhorn_balance(_random_rows(3, 20, 2, scale=4.0), 1e-12, max_iter=2)
    assert not res.converged and res.iterations == 2


def test_rejects_negative():
    with pytest.raises(ValueError):
        sinkhorn_balance(np.array([[1.2, -0.2], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        sinkhorn_log(np.zeros((2, 2)), tol=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([(4, 2), (8, 4), (30, 3), (100, 2)]), st.floats(0.1, 3.0))
def test_output_is_diagonal_scaling(seed, size, scale):
    n, k = size
    p = _random_rows(seed, n, k, scale)
    out = sinkhorn_balance(p).probs
    # log out - log p = r_i + c_j; recover offsets by least squares
    delta = np.log(out) - np.log(p)
    r = delta.mean(axis=1, keepdims=True)
    c = (delta - r).mean(axis=0, keepdims=True)
    assert np.abs(delta - r - c).max() < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([(4, 2), (6, 3), (8, 2), (12, 4)]))
def test_balancing_leaves_matching_unchanged(seed, size):
    n, k = size
    rng = RngStream(seed, 61)
    logits = rng.normal(0.0, 1.5, (n, k))
    noise = sample_gumbel(rng, n, k)
    balanced = np.log(sinkhorn_balance(softmax_rows(logits)).probs)
    a = solve_gumbel_matching(logits, noise, 1.0, n // k).assignment
    b = solve_gumbel_matching(balanced, noise, 1.0, n // k).assignment
    np.testing.assert_array_equal(a, b)


def test_log_domain_survives_low_temperature():
    # near one-hot rows converge slowly, but nothing underflows to nan
    from capmoe.core import log_softmax_rows

    a = RngStream(4, 62).normal(0.0, 1.0, (10, 2))
    log_p, it, residual, ok = sinkhorn_log(log_softmax_rows(a, 0.1))
    assert ok and it > 0
    log_p, it, residual, ok = sinkhorn_log(log_softmax_rows(a, 1e-3))
    assert np.all(np.isfinite(log_p))
    np.testing.assert_allclose(np.exp(log_p).sum(axis=1), 1.0, atol=1e-12)
    assert ok == (residual < 1e-6)
