import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meatrd.threshold import (
    GmmFit, GmmPriors, MapEmThreshold, classify, decision_boundary, e_step, fit_map_em, init_priors,
    m_step, posterior_anomaly, write_report,
)


def planted(seed, n=500):
    """0.2 N(5, 0.25) + 0.8 N(0, 0.25) target plus N(0, 0.25) reference scores."""
    r = np.random.default_rng(seed)
    n1 = r.binomial(n, 0.2)
    target = np.r_[r.normal(5.0, 0.5, n1), r.normal(0.0, 0.5, n - n1)]
    return target, r.normal(0.0, 0.5, n)


def boundary_oracle(d, fit):
    """Anomalous where the quadratic log-ratio of weighted densities is positive."""
    roots = decision_boundary(fit)
    a = 0.5 / fit.var2 - 0.5 / fit.var1
    if len(roots) == 2:
        side = np.sign(a) * (d - roots[0]) * (d - roots[1]) > 0
    else:
        side = d > roots[0]
    far = np.min(np.abs(d[:, None] - roots[None, :]), axis=1) >= 1e-6
    return side.astype(int), far


def test_init_priors_hand_example():
    p = init_priors([1, 1, 1, 3])
    assert p.m0 == 1.5 and p.s0_sq == pytest.approx(0.75)
    assert (p.kappa0, p.nu0, p.a, p.b) == (0.01, 3.0, 1.0, 10.0)


def test_init_priors_constant_scores(caplog):
    assert init_priors([2.0, 2.0, 2.0]).s0_sq == 1e-12
    assert "constant" in caplog.text


@pytest.mark.parametrize("bad", [[1.0], [1.0, np.nan]])
def test_init_priors_errors(bad):
    with pytest.raises(ValueError):
        init_priors(bad)


@pytest.mark.parametrize("kw", [dict(kappa0=0), dict(nu0=-1), dict(s0_sq=0), dict(a=0.5)])
def test_prior_validation(kw):
    with pytest.raises(ValueError):
        GmmPriors(m0=0.0, **kw)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_mixture_recovered(seed):
    target, ref = planted(seed)
    fit = fit_map_em(target, ref)
    assert 0.15 <= fit.pi1 <= 0.25
    assert 4.7 <= fit.mu1 <= 5.3
    assert -0.2 <= fit.mu2 <= 0.2
    assert fit.converged


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_log_posterior_never_decreases(seed):
    target, ref = planted(seed)
    fit = fit_map_em(target, ref, tol=0.0, max_iter=30)
    assert np.all(np.diff(fit.log_posterior) >= -1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_classify_matches_analytic_boundary(seed):
    target, ref = planted(seed)
    fit = fit_map_em(target, ref)
    grid = np.r_[target, np.linspace(-3, 8, 2001)]
    expected, far = boundary_oracle(grid, fit)
    np.testing.assert_array_equal(classify(grid, fit)[far], expected[far])


def test_printed_variance_form_fails_the_oracle():
    # the unnormalised scatter inflates both variances and merges the components
    target, ref = planted(0)
    fit = fit_map_em(target, ref, variance_form="printed")
    assert fit.var1 > 100 and abs(fit.mu1 - fit.mu2) < 0.1


def test_all_identical_scores_are_degenerate(caplog):
    fit = fit_map_em(np.full(20, 3.0), np.r_[np.zeros(5), np.ones(5)])
    assert fit.degenerate and "degenerate" in caplog.text
    assert np.all(np.isfinite(fit.params()))


def test_single_target_score():
    fit = fit_map_em([4.0], [0.0, 1.0, 0.5])
    assert np.all(np.isfinite(fit.params()))


@pytest.mark.parametrize("bad", [[], [1.0, np.inf]])
def test_bad_target_scores(bad):
    with pytest.raises(ValueError):
        fit_map_em(bad, [0.0, 1.0])


def test_needs_priors_or_reference():
    with pytest.raises(ValueError):
        fit_map_em([1.0, 2.0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_responsibilities_sum_to_one(scores):
    fit = GmmFit(pi1=0.3, mu1=2.0, var1=1.5, mu2=0.0, var2=0.7)
    q = e_step(scores, fit)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((q >= 0) & (q <= 1))


def test_m_step_orders_components():
    d = np.r_[np.zeros(10), np.full(10, 4.0)]
    resp = np.column_stack([(d == 0).astype(float), (d == 4).astype(float)])
    fit = m_step(d, resp, GmmPriors(m0=1.0))
    assert fit.mu1 > fit.mu2
    np.testing.assert_allclose(fit.responsibilities[:, 0], (d == 4).astype(float))


def test_m_step_unknown_form():
    with pytest.raises(ValueError):
        m_step([0.0, 1.0], np.full((2, 2), 0.5), GmmPriors(m0=0.0), "other")


def test_estimator_wrapper_and_report(tmp_path):
    target, ref = planted(4)
    thr = MapEmThreshold().fit(target, ref)
    pred = thr.predict(target)
    np.testing.assert_array_equal(pred, classify(target, thr.fit_))
    np.testing.assert_allclose(thr.predict_proba(target)[:, 0], posterior_anomaly(target, thr.fit_))
    rep = thr.report(target)
    write_report(tmp_path / "em.json", rep)
    back = json.loads((tmp_path / "em.json").read_text())
    assert set(back) >= {"priors", "log_posterior", "final", "iterations", "converged", "label_counts"}
    assert back["label_counts"]["anomaly"] == int(pred.sum())
