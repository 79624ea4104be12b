from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llm4ts.agent import (ActionPosterior, ThompsonSampler, TsConfig, propose_action, sample_mvn,
                          update_posterior)
from llm4ts.errors import ConfigError, NumericalError


def batch_posterior(mu0, Sigma0, V, r, sigma_y2):
    """Conjugate posterior from all observations at once (precision form, solved directly)."""
    prec = np.linalg.inv(Sigma0) + V.T @ V / sigma_y2
    Sigma = np.linalg.inv(prec)
    mu = np.linalg.solve(prec, np.linalg.solve(Sigma0, mu0) + V.T @ r / sigma_y2)
    return mu, Sigma


def test_scalar_update():
    post = ActionPosterior(np.zeros(1), np.array([[100.0]]))
    new = update_posterior(post, np.array([1.0]), 50.0, 625.0)
    sigma = 1 / (1 / 100 + 1 / 625)
    assert new.Sigma[0, 0] == pytest.approx(sigma, rel=1e-12)
    assert new.mu[0] == pytest.approx(sigma * 50 / 625, rel=1e-12)
    assert new.Sigma[0, 0] == pytest.approx(86.2069, abs=1e-4)
    assert new.mu[0] == pytest.approx(6.89655, abs=1e-4)


def test_zero_feature_update_is_noop():
    post = ActionPosterior(np.array([1.0, -2.0]), np.diag([3.0, 4.0]))
    new = update_posterior(post, np.zeros(2), 123.0, 625.0)
    np.testing.assert_allclose(new.mu, post.mu, atol=1e-12)
    np.testing.assert_allclose(new.Sigma, post.Sigma, atol=1e-12)


def test_two_step_equals_batch():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(2, 3))
    r = rng.normal(size=2) * 10
    post = ActionPosterior(np.zeros(3), 100 * np.eye(3))
    for v, y in zip(V, r):
        post = update_posterior(post, v, y, 625.0)
    mu, Sigma = batch_posterior(np.zeros(3), 100 * np.eye(3), V, r, 625.0)
    assert np.linalg.norm(post.Sigma - Sigma) < 1e-10
    assert np.linalg.norm(post.mu - mu) < 1e-10


def test_update_rejects_non_finite():
    post = ActionPosterior(np.zeros(2), np.eye(2))
    with pytest.raises((ValueError, NumericalError)):
        update_posterior(post, np.array([np.nan, 1.0]), 1.0, 625.0)


def test_sample_mvn_degenerate_and_corrupt():
    rng = np.random.default_rng(1)
    mu = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(sample_mvn(mu, 1e-18 * np.eye(3), rng), mu, atol=1e-8)
    with pytest.raises(NumericalError):
        sample_mvn(mu, -np.eye(3), rng)


def test_sample_mvn_moments():
    rng = np.random.default_rng(2)
    draws = np.array([sample_mvn(np.zeros(2), np.eye(2), rng) for _ in range(100_000)])
    assert np.abs(np.cov(draws.T) - np.eye(2)).max() < 0.05
    draws = np.array([sample_mvn(np.zeros(2), np.diag([4.0, 1.0]), rng) for _ in range(50_000)])
    var = draws.var(axis=0)
    assert var[0] == pytest.approx(4.0, rel=0.05)
    assert var[1] == pytest.approx(1.0, rel=0.05)


def test_greedy_limit_and_tie_break():
    rng = np.random.default_rng(3)
    v = np.array([1.0, 0.5, 0.2])
    posts = [ActionPosterior(np.full(3, m), 1e-12 * np.eye(3)) for m in (0.0, 1.0, 2.0, 3.0)]
    assert all(propose_action(posts, v, rng) == 3 for _ in range(1000))
    wide = [ActionPosterior(np.zeros(3), 100 * np.eye(3)) for _ in range(4)]
    assert all(propose_action(wide, np.zeros(3), rng) == 0 for _ in range(100))


def test_symmetric_pair_frequency():
    rng = np.random.default_rng(4)
    v = np.array([1.0, 1.0, 1.0])
    posts = [ActionPosterior(np.full(3, -1e9), np.eye(3)),
             ActionPosterior(np.zeros(3), np.eye(3)),
             ActionPosterior(np.zeros(3), np.eye(3)),
             ActionPosterior(np.full(3, -1e9), np.eye(3))]
    picks = [propose_action(posts, v, rng) for _ in range(10_000)]
    assert set(picks) <= {1, 2}
    assert abs(picks.count(1) / 10_000 - 0.5) < 0.02


def test_config_defaults_and_validation():
    cfg = TsConfig()
    assert cfg.dim == 3
    np.testing.assert_array_equal(cfg.prior_cov(), 100 * np.eye(3))
    assert cfg.sigma_y2 == 625
    assert TsConfig(include_bias=True).dim == 4
    assert TsConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TsConfig(sigma_y2=0)
    with pytest.raises(ConfigError):
        TsConfig.from_dict({"nope": 1})


def test_sampler_features_with_bias():
    ts = ThompsonSampler(TsConfig(include_bias=True), np.random.default_rng(0))
    np.testing.assert_array_equal(ts.features(1, 0.2, 0.3), [1, 0.2, 0.3, 1])


# --- properties -------------------------------------------------------------------

vecs = st.lists(st.floats(-3, 3), min_size=3, max_size=3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_covariance_stays_spd_and_trace_shrinks(seed):
    rng = np.random.default_rng(seed)
    post = ActionPosterior(np.zeros(3), 100 * np.eye(3))
    trace = np.trace(post.Sigma)
    for _ in range(1000):
        v = rng.normal(size=3) * rng.choice([0.0, 1.0, 5.0])
        post = update_posterior(post, v, float(rng.normal(0, 50)), 625.0)
        new_trace = np.trace(post.Sigma)
        assert new_trace <= trace + 1e-12
        if np.any(v):
            assert new_trace < trace or new_trace < 1e-6
        trace = new_trace
    np.testing.assert_array_equal(post.Sigma, post.Sigma.T)
    np.linalg.cholesky(post.Sigma)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100), v=vecs)
def test_argmax_scale_invariance(seed, scale, v):
    v = np.array(v)
    posts = [ActionPosterior(np.arange(3.0) * k, np.eye(3) * (k + 1)) for k in range(4)]
    scaled = [ActionPosterior(p.mu * scale, p.Sigma * scale * scale) for p in posts]
    rng_a, rng_b = np.random.default_rng(seed), np.random.default_rng(seed)
    a = [propose_action(posts, v, rng_a) for _ in range(20)]
    b = [propose_action(scaled, v * scale, rng_b) for _ in range(20)]
    assert a == b


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.integers(0, 3), v=vecs, r=st.floats(-100, 300))
def test_per_action_isolation(seed, a, v, r):
    ts = ThompsonSampler(TsConfig(), np.random.default_rng(seed))
    ts.update((a + 1) % 4, np.ones(3), 10.0)
    before = [(p.mu.copy(), p.Sigma.copy()) for p in ts.posteriors]
    ts.update(a, np.array(v), r)
    for k, (mu, Sigma) in enumerate(before):
        if k != a:
            np.testing.assert_array_equal(ts.posteriors[k].mu, mu)
            np.testing.assert_array_equal(ts.posteriors[k].Sigma, Sigma)
