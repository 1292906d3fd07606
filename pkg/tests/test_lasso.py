import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datacarve.core import Dataset, center_columns
from datacarve.errors import DataError, DegenerateDesignError, SolverError, UnavailableDiagnosticError
from datacarve.lasso import (
    LassoFit,
    coordinate_descent,
    default_lambda,
    estimate_sigma,
    extract_selection,
    fit_weighted_lasso,
    kkt_residual,
    lasso_objective,
    randomization_omega,
    reconstruct_omega,
)

from conftest import make_study

# 10 * sqrt(2 log(100) / 100), 40-digit mpmath evaluation
LAMBDA_100 = 3.034854258770292701725944787099756914787


def test_default_lambda_value():
    lam = default_lambda(100, 100, 1.0, 100, 1.0)
    assert lam.shape == (100,)
    np.testing.assert_allclose(lam, LAMBDA_100, rtol=1e-15)


def test_default_lambda_zero_multiplier_and_linearity():
    assert np.all(default_lambda(50, 20, 1.0, 80, c=0.0) == 0.0)
    np.testing.assert_allclose(default_lambda(50, 20, 2.0, 80), 2.0 * default_lambda(50, 20, 1.0, 80))


@pytest.mark.parametrize("args", [(50, 1, 1.0, 80), (50, 20, 0.0, 80), (50, 20, -1.0, 80)])
def test_default_lambda_rejects(args):
    with pytest.raises(DataError):
        default_lambda(*args)


def test_full_shrinkage_gives_ols_on_treatment(rng):
    data = make_study(rng)
    fit = fit_weighted_lasso(data, np.full(data.p, 1e6), 0.5, 2 * data.n)
    assert fit.support.size == 0
    ols = np.linalg.lstsq(data.d, data.y, rcond=None)[0]
    np.testing.assert_allclose(fit.alpha_l, ols, rtol=1e-12)


def test_orthogonal_soft_threshold(rng):
    n = 40
    basis, _ = np.linalg.qr(np.column_stack([np.ones(n), rng.standard_normal((n, 2))]))
    d, x = basis[:, 1] * 3.0, basis[:, 2] * 2.0
    y = 0.7 * d + 1.1 * x + 0.05 * rng.standard_normal(n)
    y -= y.mean()
    data = Dataset(y, d, x[:, None])
    r, N, lam = 0.4, 100, 0.3
    fit = fit_weighted_lasso(data, [lam], r, N)
    xy = float(x @ y)
    thr = r * math.sqrt(N) * lam
    expected = math.copysign(max(abs(xy) - thr, 0.0), xy) / float(x @ x)
    assert fit.beta_l[0] == pytest.approx(expected, rel=1e-10)
    assert extract_selection(fit).selected == ((0,) if expected != 0 else ())
    assert fit.alpha_l[0] == pytest.approx(float(d @ y) / float(d @ d), rel=1e-10)


def test_extract_selection_examples():
    fit = LassoFit(np.zeros(1), np.array([0.0, 1.2, 0.0, -0.3]), np.full(4, 2.0), 0.5, 10, 0.0)
    sel = extract_selection(fit)
    assert sel.selected == (1, 3) and sel.signs == (1, -1)
    np.testing.assert_array_equal(sel.lam, [2.0, 2.0])
    empty = extract_selection(LassoFit(np.zeros(1), np.zeros(3), np.ones(3), 0.5, 10, 0.0))
    assert empty.selected == () and empty.signs == ()


@pytest.mark.parametrize("n,p", [(50, 20), (40, 120), (200, 30)])
def test_kkt_holds(rng, n, p):
    beta = np.zeros(p)
    beta[:3] = (1.5, -1.0, 0.8)
    data = make_study(rng, n=n, p=p, beta=beta)
    N = n + 50
    fit = fit_weighted_lasso(data, default_lambda(n, p, 1.0, N, 0.7), n / N, N)
    active, slack = kkt_residual(fit, data)
    assert active <= 1e-6
    assert slack <= 1e-8


def test_zero_penalty_is_ols(rng):
    data = make_study(rng, n=60, p=5)
    fit = fit_weighted_lasso(data, np.zeros(5), 0.5, 120)
    design = np.hstack([data.d, data.x])
    ols = np.linalg.lstsq(design, data.y, rcond=None)[0]
    np.testing.assert_allclose(np.concatenate([fit.alpha_l, fit.beta_l]), ols, rtol=1e-7, atol=1e-9)
    assert kkt_residual(fit, data)[0] < 1e-8


def test_kkt_detects_perturbation(rng):
    beta = np.zeros(10)
    beta[:2] = (2.0, -1.5)
    data = make_study(rng, n=80, p=10, beta=beta)
    fit = fit_weighted_lasso(data, np.full(10, 1.0), 0.5, 160)
    j = int(fit.support[0])
    b = fit.beta_l.copy()
    b[j] += 0.1
    bumped = LassoFit(fit.alpha_l, b, fit.lam, fit.r, fit.n_total, fit.objective)
    assert kkt_residual(bumped, data)[0] > 0.01


def test_larger_penalty_objective_ordering(rng):
    beta = np.zeros(15)
    beta[:4] = 1.0
    data = make_study(rng, n=60, p=15, beta=beta)
    lam = np.full(15, 0.8)
    r, N = 0.6, 100
    old = fit_weighted_lasso(data, lam, r, N)
    for mult in (1.5, 3.0):
        new = fit_weighted_lasso(data, mult * lam, r, N)
        at_old = lasso_objective(data, old.alpha_l, old.beta_l, mult * lam, r, N)
        assert new.objective <= at_old + 1e-12


def test_row_permutation_invariance(rng):
    beta = np.zeros(12)
    beta[[0, 5]] = (1.0, -1.0)
    data = make_study(rng, n=50, p=12, beta=beta)
    perm = rng.permutation(data.n)
    shuffled = Dataset(data.y[perm], data.d[perm], data.x[perm])
    a = fit_weighted_lasso(data, np.full(12, 0.5), 0.5, 100)
    b = fit_weighted_lasso(shuffled, np.full(12, 0.5), 0.5, 100)
    np.testing.assert_array_equal(a.support, b.support)
    np.testing.assert_allclose(a.beta_l, b.beta_l, atol=1e-9)


def test_residual_form_solver_agrees_with_gram_form(rng):
    import datacarve.lasso as lasso_mod

    beta = np.zeros(30)
    beta[:3] = 1.0
    data = make_study(rng, n=40, p=30, beta=beta)
    pen = np.full(30, 20.0)
    gram = coordinate_descent(data.y, data.d, data.x, pen)
    old = lasso_mod.GRAM_MAX_P
    lasso_mod.GRAM_MAX_P = 0
    try:
        resid = coordinate_descent(data.y, data.d, data.x, pen)
    finally:
        lasso_mod.GRAM_MAX_P = old
    np.testing.assert_allclose(gram[1], resid[1], atol=1e-8)
    np.testing.assert_allclose(gram[0], resid[0], atol=1e-8)


def test_rank_deficient_treatment(rng):
    d = rng.standard_normal((30, 1))
    data = center_columns(Dataset(rng.standard_normal(30), np.hstack([d, 2 * d]), rng.standard_normal((30, 4))))
    with pytest.raises(DegenerateDesignError):
        fit_weighted_lasso(data, np.ones(4), 0.5, 60)


def test_sweep_cap_raises_solver_error(rng):
    data = make_study(rng, n=30, p=60, beta=np.r_[np.ones(5), np.zeros(55)])
    with pytest.raises(SolverError) as info:
        coordinate_descent(data.y, data.d, data.x, np.full(60, 1e-3), max_sweeps=2)
    assert info.value.last_iterate is not None


@pytest.mark.parametrize("r,N", [(0.0, 100), (1.0, 100), (0.5, 10)])
def test_fit_rejects_bad_ratio(rng, r, N):
    data = make_study(rng, n=20, p=3)
    with pytest.raises(DataError):
        fit_weighted_lasso(data, np.ones(3), r, N)


def test_estimate_sigma_close_to_truth(rng):
    beta = np.zeros(20)
    beta[:3] = 2.0
    data = make_study(rng, n=400, p=20, beta=beta, sigma=1.5)
    fit = fit_weighted_lasso(data, default_lambda(400, 20, 1.5, 800), 0.5, 800)
    assert estimate_sigma(data, fit) == pytest.approx(1.5, rel=0.15)


def _pair(rng, n_k=80, n_v=50, p=12):
    beta = np.zeros(p)
    beta[:3] = (1.0, -1.0, 0.5)
    existing = make_study(rng, n=n_k, p=p, beta=beta)
    validation = make_study(rng, n=n_v, p=p, beta=beta)
    N = n_k + n_v
    fit = fit_weighted_lasso(existing, np.full(p, 0.9), n_k / N, N)
    return existing, validation, fit


def test_omega_reconstruction(rng):
    for _ in range(20):
        existing, validation, fit = _pair(rng)
        diag = randomization_omega(existing, validation, fit)
        rebuilt = reconstruct_omega(existing, validation, fit, diag)
        np.testing.assert_allclose(rebuilt, diag.omega, atol=1e-6)
        assert np.max(np.abs(diag.subgradient), initial=0.0) <= 1 + 1e-8


def test_omega_identical_halves_vanishes(rng):
    data = make_study(rng, n=50, p=6, beta=[1, 0, 0, 0, 0, 0])
    fit = fit_weighted_lasso(data, np.full(6, 0.5), 0.5, 100)
    diag = randomization_omega(data, data, fit)
    np.testing.assert_allclose(diag.omega, 0.0, atol=1e-12)


def test_omega_needs_full_validation(rng):
    existing, validation, fit = _pair(rng)
    with pytest.raises(UnavailableDiagnosticError):
        randomization_omega(existing, validation.restrict(range(5)), fit)


def test_omega_covariance_matches_scaled_gram(rng):
    """omega / sqrt(N) has covariance close to (1 - r) / r times the design covariance."""
    p, n_k, n_v = 2, 300, 150
    N = n_k + n_v
    r = n_k / N
    draws = []
    for _ in range(600):
        existing = make_study(rng, n=n_k, p=p)
        validation = make_study(rng, n=n_v, p=p)
        fit = fit_weighted_lasso(existing, np.full(p, 1e3), r, N)
        draws.append(randomization_omega(existing, validation, fit).omega)
    emp = np.cov(np.array(draws).T)
    # design covariance of (d, x): d ~ N(0,1), x = z + 0.3 d
    g = np.array([[1.0, 0.3, 0.3], [0.3, 1.09, 0.09], [0.3, 0.09, 1.09]])
    target = (1 - r) / r * g
    np.testing.assert_allclose(emp, target, atol=0.2 * np.max(target))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 3.0))
def test_kkt_property(seed, lam):
    rng = np.random.default_rng(seed)
    data = make_study(rng, n=30, p=40, beta=np.r_[1.0, -1.0, np.zeros(38)])
    fit = fit_weighted_lasso(data, np.full(40, lam), 0.5, 60)
    active, slack = kkt_residual(fit, data)
    assert active <= 1e-6 and slack <= 1e-8
