"""Calibration, weighted logistic regression, propensity models and the ME model."""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np
from scipy import linalg
from scipy.special import expit

from .bigdata import log_earnings
from .population import INDUSTRIES, PopulationFrame


class WeightingError(ValueError):
    pass


class SingularSystemError(WeightingError):
    def __init__(self, message: str, dimension: int):
        super().__init__(message)
        self.dimension = dimension


class SeparationError(WeightingError):
    pass


class LogisticConvergenceError(RuntimeError):
    pass


class OverlapTooSmallError(WeightingError):
    pass


class DegenerateFitError(WeightingError):
    pass


class NegativeWeightsWarning(UserWarning):
    pass


def _first_dependent_column(M: np.ndarray, rtol: float = 1e-10) -> int | None:
    """Index of the first column lying in the span of the earlier ones."""
    if M.shape[1] == 0:
        return None
    norms = np.linalg.norm(M, axis=0)
    if (norms == 0).any():
        return int(np.flatnonzero(norms == 0)[0])
    r = np.abs(np.diag(np.linalg.qr(M / norms, mode="r")))
    bad = np.flatnonzero(r <= rtol * max(r.max(), 1.0))
    return int(bad[0]) if bad.size else None


def _sym_solve(T: np.ndarray, r: np.ndarray) -> np.ndarray:
    # Jacobi equilibration keeps mixed-scale columns (counts vs dollars) well conditioned
    s = np.sqrt(np.abs(np.diag(T)))
    s[s == 0] = 1.0
    Ts = T / np.outer(s, s)
    return linalg.solve(Ts, r / s, assume_a="sym") / s


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class CalibrationProblem:
    d: np.ndarray
    x: np.ndarray
    X: np.ndarray
    q: np.ndarray | None = None

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.X = np.atleast_1d(np.asarray(self.X, dtype=float))
        if self.x.shape != (self.d.size, self.X.size):
            raise WeightingError(
                f"covariate rows have shape {self.x.shape}, expected ({self.d.size}, {self.X.size})")
        if not (self.d > 0).all():
            raise WeightingError("initial weights must be positive")
        self.q = np.ones_like(self.d) if self.q is None else np.asarray(self.q, dtype=float)
        if not (self.q > 0).all():
            raise WeightingError("q must be positive")


@dataclasses.dataclass
class CalibrationResult:
    weights: np.ndarray
    lam: np.ndarray
    n_negative: int
    residual: float


def chi_square_calibrate(problem: CalibrationProblem) -> CalibrationResult:
    """Chi-square distance calibration: w = d(1 + q x'lam)."""
    d, x, X, q = problem.d, problem.x, problem.X, problem.q
    dq = d * q
    bad = _first_dependent_column(np.sqrt(dq)[:, None] * x)
    if bad is not None:
        raise SingularSystemError(f"calibration system is singular in dimension {bad}", bad)
    T = x.T @ (dq[:, None] * x)
    r = X - d @ x
    lam = _sym_solve(T, r)
    w = d * (1 + q * (x @ lam))
    # one step of iterative refinement absorbs cancellation in Sum w x
    r2 = X - w @ x
    if np.any(r2 != 0):
        lam2 = _sym_solve(T, r2)
        lam = lam + lam2
        w = w + dq * (x @ lam2)
    residual = float(np.linalg.norm(w @ x - X))
    if residual > 1e-8 * (1 + np.linalg.norm(X)):
        raise SingularSystemError(f"calibration residual {residual:.3g} too large; system ill-conditioned",
                                  int(np.argmax(np.abs(w @ x - X))))
    n_neg = int((w < 0).sum())
    if n_neg:
        warnings.warn(f"{n_neg} negative calibrated weights", NegativeWeightsWarning, stacklevel=2)
    return CalibrationResult(weights=w, lam=lam, n_negative=n_neg, residual=residual)


def calibrate(d, x, X, q=None) -> CalibrationResult:
    """Shorthand for ``chi_square_calibrate(CalibrationProblem(...))`` without warnings."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NegativeWeightsWarning)
        return chi_square_calibrate(CalibrationProblem(d, x, X, q))


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class LogisticFit:
    coef: np.ndarray
    n_iter: int
    grad_norm: float
    loglik: float


def _loglik(eta, y, w):
    return float(w @ (y * eta - np.logaddexp(0.0, eta)))


def fit_logistic_weighted(y, X, weights=None, tol: float = 1e-8, max_iter: int = 100) -> LogisticFit:
    """Weighted logistic regression by Newton-Raphson (IRLS) with step halving.

    Converges when the score norm is at most ``tol`` (or, for very large
    designs, when the Newton step hits machine precision with a score that is
    negligible relative to the data scale).
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if not ((y == 0) | (y == 1)).all():
        raise WeightingError("responses must be 0/1")
    if (w < 0).any():
        raise WeightingError("case weights must be nonnegative")
    pos = w > 0
    if not pos.any():
        raise WeightingError("no positive case weights")
    if np.all(y[pos] == 1) or np.all(y[pos] == 0):
        raise SeparationError("all responses identical: complete separation")
    bad = _first_dependent_column(np.sqrt(w)[:, None] * X)
    if bad is not None:
        raise SingularSystemError(f"logistic design is rank deficient in column {bad}", bad)

    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    Z = X / scale
    data_scale = float(w @ np.abs(X).sum(axis=1))
    beta = np.zeros(X.shape[1])
    eta = Z @ beta
    ll = _loglik(eta, y, w)
    big_steps = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        grad = Z.T @ (w * (y - p))
        # score in the original parametrisation: X'r = (Z'r) * scale
        gnorm = float(np.linalg.norm(grad * scale))
        W = w * p * (1 - p)
        H = Z.T @ (W[:, None] * Z)
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("information matrix became singular: fitted probabilities "
                                  "numerically 0 or 1 (separation)") from None
        small_step = np.linalg.norm(step) <= 1e-10 * (1 + np.linalg.norm(beta))
        # on large designs the attainable score norm is set by rounding in the sums
        if small_step and gnorm <= max(tol, 1e-13 * data_scale):
            return LogisticFit(beta / scale, it, gnorm, ll)
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = Z @ cand
            ll_c = _loglik(eta_c, y, w)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t /= 2
        big_steps = big_steps + 1 if np.linalg.norm(t * step) > 0.5 else 0
        if big_steps >= 25:
            raise SeparationError("coefficients diverging: separation detected")
        beta, eta, ll = cand, eta_c, ll_c
    raise LogisticConvergenceError(f"logistic fit did not converge in {max_iter} iterations")


# ---------------------------------------------------------------------------
# Propensity models
# ---------------------------------------------------------------------------


def propensity_covariates(frame: PopulationFrame, index: np.ndarray | None = None,
                          earnings: np.ndarray | None = None) -> np.ndarray:
    """Rows (1, frame employment, 17 industry dummies with reference B[, ln earnings])."""
    idx = np.arange(frame.N) if index is None else np.asarray(index)
    ind = frame.industry[idx]
    dummies = (ind[:, None] == np.arange(1, len(INDUSTRIES))[None, :]).astype(float)
    cols = [np.ones(idx.size), frame.frame_employment[idx].astype(float), dummies]
    if earnings is not None:
        cols.append(log_earnings(np.asarray(earnings, dtype=float)))
    return np.column_stack(cols)


@dataclasses.dataclass
class PropensityModel:
    """Fitted propensity model. ``keep`` marks the covariate columns that
    were estimable on the fitting data (industries absent there fall back to
    the reference level)."""

    coef: np.ndarray
    kind: str  # KW | ALP | frame
    keep: np.ndarray
    n_iter: int = 0

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.keep] @ self.coef

    def predict(self, X: np.ndarray) -> np.ndarray:
        eta = self.linear_predictor(X)
        if self.kind == "ALP":
            return np.exp(eta)
        return expit(eta)

    def with_coef(self, coef: np.ndarray) -> "PropensityModel":
        return dataclasses.replace(self, coef=np.asarray(coef, dtype=float))


def _fit_propensity(y, X, w, kind) -> PropensityModel:
    present = (X[w > 0] != 0).any(axis=0) if w is not None else (X != 0).any(axis=0)
    present[0] = True
    fit = fit_logistic_weighted(y, X[:, present], w)
    return PropensityModel(coef=fit.coef, kind=kind, keep=present, n_iter=fit.n_iter)


def kw_propensities(X_A: np.ndarray, delta_A: np.ndarray, d_A: np.ndarray) -> PropensityModel:
    """Design-weighted fit of B-membership on the reference sample."""
    return _fit_propensity(np.asarray(delta_A, dtype=float), X_A, np.asarray(d_A, dtype=float), "KW")


def alp_propensities(X_A: np.ndarray, d_A: np.ndarray, X_B: np.ndarray) -> PropensityModel:
    """Pooled fit: B rows with Z=1 and weight 1, A rows with Z=0 and weight d.
    Propensities are the fitted odds and may exceed 1."""
    X = np.vstack([X_B, X_A])
    z = np.concatenate([np.ones(len(X_B)), np.zeros(len(X_A))])
    w = np.concatenate([np.ones(len(X_B)), np.asarray(d_A, dtype=float)])
    return _fit_propensity(z, X, w, "ALP")


def frame_propensities(X_U: np.ndarray, delta_U: np.ndarray) -> PropensityModel:
    """Unweighted fit of B-membership over the whole frame."""
    return _fit_propensity(np.asarray(delta_U, dtype=float), X_U, None, "frame")


# ---------------------------------------------------------------------------
# Measurement-error model
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MEModel:
    beta0: float
    beta1: float
    residual_variance: float
    n_fit: int


def fit_me_model(y_true, y_star) -> MEModel:
    """OLS of observed y* on true y over the linked overlap."""
    y = np.asarray(y_true, dtype=float)
    ys = np.asarray(y_star, dtype=float)
    if y.size < 3:
        raise OverlapTooSmallError(f"need at least 3 linked units, got {y.size}")
    yc = y - y.mean()
    sxx = yc @ yc
    if sxx <= 0:
        raise DegenerateFitError("true values are constant over the overlap")
    b1 = float(yc @ (ys - ys.mean()) / sxx)
    b0 = float(ys.mean() - b1 * y.mean())
    if abs(b1) < 1e-12:
        raise DegenerateFitError("fitted slope is numerically zero")
    resid = ys - b0 - b1 * y
    return MEModel(b0, b1, float(resid @ resid / (y.size - 2)), int(y.size))


def correct_me(model: MEModel, y_star) -> np.ndarray:
    return (np.asarray(y_star, dtype=float) - model.beta0) / model.beta1
