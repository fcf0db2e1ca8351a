import numpy as np
import pytest

from capmoe import model as toy
from capmoe.training import ESTIMATORS, RunSpec, train


def test_runspec_validation():
    with pytest.raises(ValueError):
        RunSpec("nope", 1.0, 0)
    with pytest.raises(ValueError):
        RunSpec("sample", 0.0, 0)
    with pytest.raises(ValueError):
        RunSpec("sample", 1.0, 0, steps=0)


@pytest.mark.parametrize("name", ESTIMATORS)
def test_every_estimator_runs(name):
    rec = train(RunSpec(name, 1.0, 0, steps=20, balance_weight=0.01))
    assert not rec.failed, rec.error
    assert np.isfinite(rec.final_mse) and rec.final_mse >= 0
    assert rec.max_iw > 0


def test_deterministic_per_cell():
    a = train(RunSpec("gumbel_matching_iw", 0.3, 4, steps=30))
    b = train(RunSpec("gumbel_matching_iw", 0.3, 4, steps=30))
    assert a == b
    c = train(RunSpec("gumbel_matching_iw", 0.3, 5, steps=30))
    assert c.final_mse != a.final_mse


def test_diagnostics():
    plain = train(RunSpec("gumbel_matching", 1.0, 1, steps=10))
    assert plain.max_iw == 1.0 and plain.mean_skip_fraction == 0.0
    sh = train(RunSpec("gumbel_matching_iw", 1.0, 1, steps=10, use_sinkhorn=True))
    assert sh.mean_sinkhorn_iters > 0
    # with two experts of capacity n/2 at most half the points can overflow
    skip = train(RunSpec("sample_skip", 1.0, 1, steps=10))
    assert 0.0 < skip.mean_skip_fraction < 0.5


def test_failure_is_recorded(monkeypatch):
    def boom(state, theta, grad):
        raise FloatingPointError("non-finite gradient")

    monkeypatch.setattr(toy, "adam_step", boom)
    rec = train(RunSpec("sample", 1.0, 0, steps=5))
    assert rec.failed and not rec.success
    assert np.isnan(rec.final_mse)
    assert "FloatingPointError" in rec.error


def test_sample_solves_task_at_unit_temperature():
    rec = train(RunSpec("sample", 1.0, 0))
    assert rec.success and rec.final_mse < 0.02
