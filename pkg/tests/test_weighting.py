import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from nonprob.bigdata import SelectionModel, draw_big_dataset, selection_probabilities
from nonprob.design import bethel_chromy_allocate, default_constraints, draw_stratified_sample, stratify
from nonprob.estimators import hajek_ipw
from nonprob.population import default_config, synthesize_population
from nonprob.weighting import (
    CalibrationProblem, DegenerateFitError, NegativeWeightsWarning, OverlapTooSmallError,
    SeparationError, SingularSystemError, WeightingError, alp_propensities, calibrate,
    chi_square_calibrate, correct_me, fit_logistic_weighted, fit_me_model, frame_propensities,
    kw_propensities, propensity_covariates,
)

from oracles import calibration_brute_force, greg_weights_closed_form, irls_logistic


# --- calibration ----------------------------------------------------------


def test_calibration_hand_example():
    res = chi_square_calibrate(CalibrationProblem([1, 1], [[1], [2]], [4]))
    np.testing.assert_allclose(res.weights, [1.2, 1.4], rtol=1e-14)
    assert res.weights @ np.array([1, 2]) == pytest.approx(4)


def test_calibration_zero_correction():
    d = np.array([2.0, 3.0, 5.0])
    x = np.column_stack([np.ones(3), [1.0, 4.0, 2.0]])
    res = calibrate(d, x, d @ x)
    np.testing.assert_allclose(res.weights, d, rtol=1e-14)


def test_calibration_duplicate_column():
    x = np.column_stack([np.ones(4), np.arange(4.0), np.arange(4.0)])
    with pytest.raises(SingularSystemError) as exc:
        calibrate(np.ones(4), x, [4, 6, 6])
    assert exc.value.dimension == 2


@pytest.mark.parametrize("bad", [dict(d=[1, -1]), dict(q=[1, 0]), dict(X=[1, 2])])
def test_calibration_rejects_bad_input(bad):
    args = dict(d=[1, 1], x=[[1], [2]], X=[4], q=None) | bad
    with pytest.raises(WeightingError):
        CalibrationProblem(**args)


def test_negative_weights_warn_but_are_kept():
    with pytest.warns(NegativeWeightsWarning):
        res = chi_square_calibrate(CalibrationProblem([1, 1, 1], [[1], [2], [10]], [1]))
    assert res.n_negative > 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert calibrate([1, 1, 1], [[1], [2], [10]], [1]).n_negative == res.n_negative


@st.composite
def calibration_problems(draw):
    n = draw(st.integers(2, 5))
    p = draw(st.integers(1, n - 1))
    rows = draw(st.lists(st.lists(st.floats(-5, 5), min_size=p, max_size=p),
                         min_size=n, max_size=n))
    d = draw(st.lists(st.floats(0.5, 20), min_size=n, max_size=n))
    q = draw(st.lists(st.floats(0.2, 3), min_size=n, max_size=n))
    shift = draw(st.lists(st.floats(-3, 3), min_size=p, max_size=p))
    x = np.array(rows)
    x[:, 0] = 1.0
    d = np.array(d)
    return d, x, d @ x + np.array(shift), np.array(q)


def _well_conditioned(x, d, q):
    s = np.linalg.svd(np.sqrt(d * q)[:, None] * x, compute_uv=False)
    return s[-1] > 1e-3 * s[0]


@settings(max_examples=200, deadline=None)
@given(calibration_problems())
def test_calibration_matches_oracles(problem):
    d, x, X, q = problem
    if not _well_conditioned(x, d, q):
        return
    w = calibrate(d, x, X, q).weights
    np.testing.assert_allclose(w, greg_weights_closed_form(d, x, X, q), atol=1e-8, rtol=0)
    np.testing.assert_allclose(w, calibration_brute_force(d, x, X, q), atol=1e-8, rtol=0)
    assert np.linalg.norm(w @ x - X) <= 1e-8 * (1 + np.linalg.norm(X))


@settings(max_examples=100, deadline=None)
@given(calibration_problems())
def test_calibration_idempotent(problem):
    d, x, X, q = problem
    if not _well_conditioned(x, d, q):
        return
    w = calibrate(d, x, X, q).weights
    if (w <= 0).any():
        return
    np.testing.assert_allclose(calibrate(w, x, X, q).weights, w, atol=1e-10, rtol=0)


def test_calibration_mixed_scales():
    rng = np.random.default_rng(0)
    n = 4000
    x = np.column_stack([np.ones(n), rng.gamma(2, 50, n)])
    d = rng.uniform(10, 200, n)
    X = d @ x * np.array([1.01, 0.98])
    res = calibrate(d, x, X)
    assert res.residual <= 1e-8 * (1 + np.linalg.norm(X))


# --- logistic -------------------------------------------------------------


def test_intercept_only_closed_form():
    y = np.r_[np.ones(3), np.zeros(7)]
    fit = fit_logistic_weighted(y, np.ones((10, 1)))
    assert fit.coef[0] == pytest.approx(logit(0.3), abs=1e-10)
    assert fit.coef[0] == pytest.approx(-0.8473, abs=1e-4)


def test_matches_irls_oracle_ten_points():
    x = np.array([0.5, 1.1, 1.9, 2.4, 3.0, 3.7, 4.1, 5.0, 5.6, 6.3])
    y = np.array([0, 0, 1, 0, 0, 1, 1, 0, 1, 1.0])
    X = np.column_stack([np.ones(10), x])
    np.testing.assert_allclose(fit_logistic_weighted(y, X).coef, irls_logistic(y, X), atol=1e-6)


@st.composite
def logistic_data(draw):
    n = draw(st.integers(10, 100))
    seed = draw(st.integers(0, 2**31))
    weighted = draw(st.booleans())
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.gamma(2, 2, size=n)])
    beta = rng.normal(scale=0.5, size=3)
    y = (rng.random(n) < expit(X @ beta)).astype(float)
    w = rng.uniform(0.5, 30, size=n) if weighted else None
    return y, X, w


@settings(max_examples=150, deadline=None)
@given(logistic_data())
def test_matches_irls_oracle(data):
    y, X, w = data
    try:
        fit = fit_logistic_weighted(y, X, w)
    except SeparationError:
        return
    ref = irls_logistic(y, X, w)
    np.testing.assert_allclose(fit.coef, ref, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(logistic_data())
def test_score_and_gradient(data):
    y, X, w = data
    try:
        fit = fit_logistic_weighted(y, X, w)
    except SeparationError:
        return
    w = np.ones_like(y) if w is None else w
    score = X.T @ (w * (y - expit(X @ fit.coef)))
    assert np.linalg.norm(score) <= 1e-8

    def ll(b):
        eta = X @ b
        return w @ (y * eta - np.logaddexp(0, eta))

    b = fit.coef + 0.3
    h = 1e-6
    num = np.array([(ll(b + h * e) - ll(b - h * e)) / (2 * h) for e in np.eye(3)])
    ana = X.T @ (w * (y - expit(X @ b)))
    np.testing.assert_allclose(num, ana, rtol=1e-5, atol=1e-6 * np.abs(ana).max())


def test_all_ones_separation():
    with pytest.raises(SeparationError):
        fit_logistic_weighted(np.ones(5), np.ones((5, 1)))


def test_perfect_split_separation():
    x = np.arange(10.0)
    with pytest.raises(SeparationError):
        fit_logistic_weighted((x > 4).astype(float), np.column_stack([np.ones(10), x]))


def test_rank_deficient_design():
    X = np.column_stack([np.ones(6), np.arange(6.0), 2 * np.arange(6.0)])
    with pytest.raises(SingularSystemError):
        fit_logistic_weighted(np.array([0, 1, 0, 1, 1, 0.0]), X)


def test_logistic_input_checks():
    with pytest.raises(WeightingError):
        fit_logistic_weighted(np.array([0, 2.0]), np.ones((2, 1)))
    with pytest.raises(WeightingError):
        fit_logistic_weighted(np.array([0, 1.0]), np.ones((2, 1)), weights=[1, -1])


# --- propensities ---------------------------------------------------------


def test_covariate_layout(small_frame):
    X = propensity_covariates(small_frame, np.arange(5), earnings=small_frame.earnings[:5])
    assert X.shape == (5, 1 + 1 + 17 + 1)
    assert (X[:, 0] == 1).all()
    assert (X[:, 2:19].sum(axis=1) == (small_frame.industry[:5] > 0)).all()


def test_kw_constant_covariate_gives_weighted_mean():
    rng = np.random.default_rng(1)
    delta = rng.random(200) < 0.4
    d = rng.uniform(1, 10, 200)
    model = kw_propensities(np.ones((200, 1)), delta, d)
    np.testing.assert_allclose(model.predict(np.ones((3, 1))), (d @ delta) / d.sum(), rtol=1e-10)


def test_kw_recovers_null_model(small_frame):
    f = small_frame
    X = np.column_stack([np.ones(f.N), f.frame_employment])
    big = draw_big_dataset(f, np.full(f.N, 0.5), False, np.random.default_rng(3))
    model = kw_propensities(X, big.delta, np.ones(f.N))
    p = model.predict(X)
    cov = np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))
    z = model.coef / np.sqrt(np.diag(cov))
    assert (np.abs(z) < 3).all()


def test_frame_recovers_sar_coefficients():
    f = synthesize_population(default_config(n=200_000), seed=4)
    pi = selection_probabilities(f, SelectionModel.sar({}))
    big = draw_big_dataset(f, pi, False, np.random.default_rng(5))
    X = np.column_stack([np.ones(f.N), f.frame_employment])
    model = frame_propensities(X, big.delta)
    p = model.predict(X)
    se = np.sqrt(np.diag(np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))))
    assert (np.abs(model.coef - [0.09, 0.009]) < 3 * se).all()
    again = frame_propensities(X, big.delta)
    assert np.array_equal(again.coef, model.coef)


def test_frame_separation():
    X = np.column_stack([np.ones(10), np.r_[np.zeros(5), np.ones(5)]])
    with pytest.raises(SeparationError):
        frame_propensities(X, np.r_[np.zeros(5), np.ones(5)].astype(bool))


def test_alp_intercept_only():
    model = alp_propensities(np.ones((40, 1)), np.full(40, 10.0), np.ones((100, 1)))
    np.testing.assert_allclose(model.predict(np.ones((2, 1))), 0.25, rtol=1e-10)


def test_alp_balanced_pool():
    rng = np.random.default_rng(2)
    XB = np.column_stack([np.ones(50), rng.normal(size=50)])
    model = alp_propensities(XB, np.ones(50), XB)
    np.testing.assert_allclose(model.predict(XB), 1.0, atol=1e-8)


def test_alp_can_exceed_one():
    model = alp_propensities(np.ones((10, 1)), np.ones(10), np.ones((30, 1)))
    assert model.predict(np.ones((1, 1)))[0] == pytest.approx(3.0)


def test_absent_dummy_columns_dropped(small_frame):
    idx = np.concatenate([np.flatnonzero(small_frame.industry == k)[:150] for k in range(3)])
    X = propensity_covariates(small_frame, idx)
    delta = np.random.default_rng(0).random(idx.size) < 0.5
    model = kw_propensities(X, delta, np.ones(idx.size))
    assert model.keep.sum() == 4
    assert model.predict(propensity_covariates(small_frame)).shape == (small_frame.N,)


def test_kw_consistency_desk_scale():
    frame = synthesize_population(default_config(n=90_000))
    pi = selection_probabilities(frame, SelectionModel.sar({}))
    strata = stratify(frame)
    alloc = bethel_chromy_allocate(strata, default_constraints())
    XU = propensity_covariates(frame)
    y = frame.earnings
    est = []
    for r in range(500):
        rng = np.random.default_rng([r, 77])
        big = draw_big_dataset(frame, pi, False, rng)
        A = draw_stratified_sample(strata, alloc, rng)
        model = kw_propensities(XU[A.index], big.delta[A.index], A.weight)
        B = big.members
        est.append(hajek_ipw(y[B], model.predict(XU[B]), frame.N)[0])
    rb = np.mean(np.array(est) / y.sum() - 1)
    assert abs(rb) < 0.01


# --- measurement error ----------------------------------------------------


def test_me_noiseless():
    y = np.array([10.0, 20.0, 35.0, 50.0])
    m = fit_me_model(y, 0.85 * y)
    assert m.beta0 == pytest.approx(0, abs=1e-10) and m.beta1 == pytest.approx(0.85)
    np.testing.assert_allclose(correct_me(m, 0.85 * y), y)


@given(b0=st.floats(-100, 100), b1=st.floats(0.1, 3),
       y=st.lists(st.floats(0, 1e5), min_size=1, max_size=20))
def test_me_inverse_identity(b0, b1, y):
    from nonprob.weighting import MEModel
    y = np.array(y)
    m = MEModel(b0, b1, 0.0, 3)
    np.testing.assert_allclose(correct_me(m, b0 + b1 * y), y, rtol=1e-9, atol=1e-7)
    np.testing.assert_array_equal(correct_me(MEModel(0.0, 1.0, 0.0, 3), y), y)


def test_me_errors():
    with pytest.raises(OverlapTooSmallError):
        fit_me_model([1, 2], [1, 2])
    with pytest.raises(DegenerateFitError):
        fit_me_model([3, 3, 3], [1, 2, 3])
    with pytest.raises(DegenerateFitError):
        fit_me_model([1, 2, 3], [5, 5, 5])


def test_me_generator_slope():
    f = synthesize_population(default_config())
    m = fit_me_model(f.earnings, f.earnings_star)
    assert abs(m.beta1 - 0.85) <= 0.02
