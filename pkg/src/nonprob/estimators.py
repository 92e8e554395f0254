"""Total estimators for (earn, emp, ovt) and the AWE ratio.

The low-level functions work on plain arrays. The roster functions at the
bottom take a :class:`ReplicateData` bundle (one replicate's B and reference
samples) and are what the simulator calls by id.
"""

from __future__ import annotations

import dataclasses
import functools
from typing import Callable

import numpy as np

from .bigdata import BigDataset
from .design import WeightedSample
from .population import INDUSTRIES, VARIABLES, PopulationFrame
from .weighting import (MEModel, PropensityModel, alp_propensities, calibrate, correct_me,
                        fit_me_model, frame_propensities, kw_propensities, propensity_covariates)


class EstimatorError(ValueError):
    pass


class ZeroPropensityError(EstimatorError):
    pass


@dataclasses.dataclass
class EstimatorOutput:
    estimator_id: str
    totals: np.ndarray  # (earn, emp, ovt)
    diagnostics: dict = dataclasses.field(default_factory=dict)

    @property
    def awe(self) -> float:
        return awe_ratio(self.totals)

    def values(self) -> np.ndarray:
        """(earn, emp, ovt, awe)."""
        return np.append(self.totals, self.awe)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _cols(y):
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def awe_ratio(totals) -> float:
    earn, emp = float(totals[0]), float(totals[1])
    if emp <= 0:
        raise EstimatorError("employment total is not positive; AWE undefined")
    return earn / emp


def ht_total(y, d) -> np.ndarray:
    return np.asarray(d, dtype=float) @ _cols(y)


def hajek_ipw(y, pihat, N: float) -> np.ndarray:
    """(N / N_hat_B) * sum_B y / pi_hat."""
    pihat = np.asarray(pihat, dtype=float)
    if pihat.size == 0:
        raise EstimatorError("big dataset is empty")
    if not (pihat > 0).all():
        raise ZeroPropensityError("propensities must be positive on B")
    w = 1.0 / pihat
    return N / w.sum() * (w @ _cols(y))


def greg_total(y, d, x, X) -> tuple[np.ndarray, int]:
    """Chi-square calibration of d to benchmarks X; returns totals and the
    negative-weight count."""
    cal = calibrate(d, x, X)
    return cal.weights @ _cols(y), cal.n_negative


def wls_fit(y, Z, w) -> np.ndarray:
    """Weighted least squares coefficients, one column per response."""
    sw = np.sqrt(np.asarray(w, dtype=float))
    coef, _, rank, _ = np.linalg.lstsq(sw[:, None] * Z, sw[:, None] * _cols(y), rcond=None)
    if rank < Z.shape[1]:
        raise EstimatorError("imputation model design is rank deficient")
    return coef


def difference_total(yhat_B, y_A, yhat_A, delta_A, d_A) -> np.ndarray:
    """sum_B yhat + sum_A d (y - delta yhat)."""
    delta_A = np.asarray(delta_A, dtype=float)[:, None]
    return _cols(yhat_B).sum(axis=0) + np.asarray(d_A) @ (_cols(y_A) - delta_A * _cols(yhat_A))


def dr_total(y_B, pihat_B, yhat_B, yhat_A, d_A, N: float, variant: str = "DR2") -> np.ndarray:
    """Doubly robust total: N times the DR1 or DR2 mean."""
    pihat_B = np.asarray(pihat_B, dtype=float)
    if not (pihat_B > 0).all():
        raise ZeroPropensityError("propensities must be positive on B")
    w = 1.0 / pihat_B
    d_A = np.asarray(d_A, dtype=float)
    resid = w @ (_cols(y_B) - _cols(yhat_B))
    pred = d_A @ _cols(yhat_A)
    if variant == "DR2":
        return N * (resid / w.sum() + pred / d_A.sum())
    if variant == "DR1":
        return resid + pred
    raise EstimatorError(f"unknown DR variant {variant!r}")


def hot_deck_impute(class_A: list[np.ndarray], class_B: list[np.ndarray], y_B,
                    rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Donor imputation with class fallback.

    ``class_A``/``class_B`` list integer class codes from the finest to the
    coarsest level; units with no donor at one level move to the next, and
    the final fallback is the whole of B. Returns imputations and the number
    of recipients that needed a fallback.
    """
    y_B = _cols(y_B)
    nA = class_A[0].size if class_A else 0
    if y_B.shape[0] == 0:
        raise EstimatorError("no donors: big dataset is empty")
    out = np.empty((nA, y_B.shape[1]))
    todo = np.ones(nA, dtype=bool)
    u = rng.random(nA)
    fallbacks = 0
    levels = list(zip(class_A, class_B)) + [(np.zeros(nA, np.int64), np.zeros(y_B.shape[0], np.int64))]
    for level, (ca, cb) in enumerate(levels):
        if not todo.any():
            break
        order = np.argsort(cb, kind="stable")
        keys, start, count = np.unique(cb[order], return_index=True, return_counts=True)
        pos = np.searchsorted(keys, ca)
        pos_c = np.minimum(pos, keys.size - 1)
        has = todo & (keys[pos_c] == ca)
        i = np.flatnonzero(has)
        donor = order[start[pos_c[i]] + np.floor(u[i] * count[pos_c[i]]).astype(np.int64)]
        out[i] = y_B[donor]
        if level > 0:
            fallbacks += i.size
        todo &= ~has
    return out, fallbacks


def auxdiv_total(y_B, industry_B, x_B, X_by_industry) -> tuple[np.ndarray, int]:
    """sum_d (X_d / X_B,d) sum_{B,d} y. Divisions without B members add 0."""
    y_B = _cols(y_B)
    if y_B.shape[0] == 0:
        raise EstimatorError("big dataset is empty")
    D = len(X_by_industry)
    XB = np.bincount(industry_B, weights=x_B, minlength=D)
    nB = np.bincount(industry_B, minlength=D)
    if ((nB > 0) & (XB <= 0)).any():
        raise EstimatorError("a division's big-data frame-employment total is zero")
    factor = np.divide(X_by_industry, XB, out=np.zeros(D), where=XB > 0)
    missing = int(((nB == 0) & (np.asarray(X_by_industry) > 0)).sum())
    return factor[industry_B] @ y_B, missing


# ---------------------------------------------------------------------------
# Replicate bundle
# ---------------------------------------------------------------------------


class FrameCache:
    """Per-population arrays reused across replicates."""

    def __init__(self, frame: PopulationFrame):
        self.frame = frame
        self.N = frame.N
        self.y_true = frame.y(False)
        self.y_star = frame.y(True)
        self.x = frame.frame_employment.astype(float)
        self.X_total = float(self.x.sum())
        self.industry = frame.industry
        self.band = frame.size_band
        self.size_group = frame.size_group
        self.X_U = propensity_covariates(frame)
        self.X_by_industry = np.bincount(self.industry, weights=self.x, minlength=len(INDUSTRIES))
        self.truth = np.append(self.y_true.sum(axis=0), 0.0)
        self.truth[3] = self.truth[0] / self.truth[1]


@dataclasses.dataclass
class ReplicateData:
    cache: FrameCache
    big: BigDataset
    samples: dict  # design -> WeightedSample
    excluded: dict  # design -> boolean mask over U of units outside A's frame
    rng_hot_deck: np.random.Generator
    mi_weights: str = "design"  # weights on A for the imputed totals
    kw_cal_benchmarks: str = "frame"  # "estimated": (N, X) replaced by HT totals from A

    @property
    def use_starred(self) -> bool:
        return self.big.use_starred

    @functools.cached_property
    def B(self) -> np.ndarray:
        return self.big.members

    @functools.cached_property
    def y_obs(self) -> np.ndarray:
        """Values as recorded in B, over U (starred under measurement error)."""
        return self.cache.y_star if self.use_starred else self.cache.y_true

    @functools.cached_property
    def y_B(self) -> np.ndarray:
        return self.y_obs[self.B]

    @functools.cached_property
    def X_B(self) -> np.ndarray:
        return self.cache.X_U[self.B]

    def sample(self, design: str) -> WeightedSample:
        try:
            return self.samples[design]
        except KeyError:
            raise EstimatorError(f"no {design} reference sample in this replicate") from None

    def A_parts(self, design: str):
        A = self.sample(design)
        return A, self.cache.y_true[A.index], A.weight, self.big.delta[A.index]

    @functools.cached_property
    def mi_weight(self) -> np.ndarray:
        """A's weights for summing imputations: design, or GREG-calibrated."""
        A = self.sample("single")
        if self.mi_weights == "design":
            return A.weight
        if self.mi_weights == "calibrated":
            rows = np.column_stack([np.ones(A.n), self.cache.x[A.index]])
            return calibrate(A.weight, rows, [self.cache.N, self.cache.X_total]).weights
        raise EstimatorError(f"unknown mi_weights {self.mi_weights!r}")

    @functools.cached_property
    def kw_model(self) -> PropensityModel:
        A = self.sample("single")
        return kw_propensities(self.cache.X_U[A.index], self.big.delta[A.index], A.weight)

    @functools.cached_property
    def kw_pihat(self) -> np.ndarray:
        return self.kw_model.predict(self.X_B)

    @functools.cached_property
    def frame_model(self) -> PropensityModel:
        return frame_propensities(self.cache.X_U, self.big.delta)

    def me_models(self, design: str) -> list[MEModel]:
        key = f"_me_{design}"
        if key not in self.__dict__:
            A = self.sample(design)
            link = self.big.delta[A.index]
            idx = A.index[link]
            self.__dict__[key] = [fit_me_model(self.cache.y_true[idx, v], self.y_obs[idx, v])
                                  for v in range(len(VARIABLES))]
        return self.__dict__[key]

    def corrected(self, rows: np.ndarray, design: str) -> np.ndarray:
        """ME-corrected B values at the given U positions."""
        models = self.me_models(design)
        return np.column_stack([correct_me(m, self.y_obs[rows, v]) for v, m in enumerate(models)])


# ---------------------------------------------------------------------------
# Roster
# ---------------------------------------------------------------------------


def _benchmark_rows(x):
    return np.column_stack([np.ones(x.size), x])


def est_ht(r: ReplicateData):
    _, y, d, _ = r.A_parts("single")
    return ht_total(y, d), {}


def est_greg(r: ReplicateData):
    A, y, d, _ = r.A_parts("single")
    tot, neg = greg_total(y, d, _benchmark_rows(r.cache.x[A.index]), [r.cache.N, r.cache.X_total])
    return tot, {"negative_weights": neg}


def est_rdi(r: ReplicateData):
    A, y, d, delta = r.A_parts("single")
    if r.big.N_B == 0:
        tot, neg = greg_total(y, d, np.ones((A.n, 1)), [r.cache.N])
        return tot, {"negative_weights": neg, "empty_big_dataset": 1}
    e_A = r.y_obs[A.index, 0]
    rows = np.column_stack([np.ones(A.n), delta, delta * e_A])
    X = [r.cache.N, r.big.N_B, r.y_B[:, 0].sum()]
    tot, neg = greg_total(y, d, rows, X)
    return tot, {"negative_weights": neg}


def est_qr_ma(r: ReplicateData):
    A, y, d, delta = r.A_parts("single")
    Z_A = _benchmark_rows(r.cache.x[A.index])
    coef = wls_fit(y, Z_A, d)
    yhat_B = _benchmark_rows(r.cache.x[r.B]) @ coef
    return difference_total(yhat_B, y, Z_A @ coef, delta, d), {}


def est_kw(r: ReplicateData):
    return hajek_ipw(r.y_B, r.kw_pihat, r.cache.N), {}


def _kw_cal(r: ReplicateData, y_B):
    if r.kw_cal_benchmarks == "frame":
        X = [r.cache.N, r.cache.X_total]
    elif r.kw_cal_benchmarks == "estimated":
        A = r.sample("single")
        X = ht_total(_benchmark_rows(r.cache.x[A.index]), A.weight)
    else:
        raise EstimatorError(f"unknown kw_cal_benchmarks {r.kw_cal_benchmarks!r}")
    tot, neg = greg_total(y_B, 1.0 / r.kw_pihat, _benchmark_rows(r.cache.x[r.B]), X)
    return tot, {"negative_weights": neg}


def est_kw_cal(r: ReplicateData):
    return _kw_cal(r, r.y_B)


def est_kw_earn(r: ReplicateData):
    A, y, d, delta = r.A_parts("single")
    X_A = np.column_stack([r.cache.X_U[A.index], np.log(np.maximum(y[:, 0], 1.0))])
    model = kw_propensities(X_A, delta, d)
    X_B = np.column_stack([r.X_B, np.log(np.maximum(r.y_B[:, 0], 1.0))])
    return hajek_ipw(r.y_B, model.predict(X_B), r.cache.N), {}


def est_alp(r: ReplicateData):
    A, _, d, _ = r.A_parts("single")
    model = alp_propensities(r.cache.X_U[A.index], d, r.X_B)
    pihat = model.predict(r.X_B)
    return hajek_ipw(r.y_B, pihat, r.cache.N), {"propensity_above_one": int((pihat > 1).sum())}


def _wgt_reg(r: ReplicateData):
    """KW-weighted regression of B's y on the propensity covariates."""
    model = r.kw_model
    Z_B = r.X_B[:, model.keep]
    coef = wls_fit(r.y_B, Z_B, 1.0 / r.kw_pihat)
    A = r.sample("single")
    return Z_B @ coef, r.cache.X_U[A.index][:, model.keep] @ coef


def est_wgt_reg_mi(r: ReplicateData):
    _, yhat_A = _wgt_reg(r)
    return ht_total(yhat_A, r.mi_weight), {}


def est_dr_wgt(r: ReplicateData):
    yhat_B, yhat_A = _wgt_reg(r)
    d = r.sample("single").weight
    return dr_total(r.y_B, r.kw_pihat, yhat_B, yhat_A, d, r.cache.N, "DR2"), {}


def est_hd_mi(r: ReplicateData):
    # classes: industry x size band, then size band, then all of B
    A = r.sample("single")
    nb = int(r.cache.band.max()) + 1
    ind, band = r.cache.industry, r.cache.band
    fine_A = ind[A.index] * nb + band[A.index]
    fine_B = ind[r.B] * nb + band[r.B]
    yhat, fb = hot_deck_impute([fine_A, band[A.index]], [fine_B, band[r.B]], r.y_B, r.rng_hot_deck)
    return ht_total(yhat, r.mi_weight), {"donor_fallbacks": fb}


def est_sp(r: ReplicateData):
    _, y, d, _ = r.A_parts("dual_screening")
    return r.y_B.sum(axis=0) + ht_total(y, d), {}


def est_sp_cal(r: ReplicateData):
    A, y, d, _ = r.A_parts("dual_screening")
    C = ~r.big.delta
    if not C.any():  # B covers U: nothing left to estimate
        return r.y_B.sum(axis=0), {"negative_weights": 0}
    X = [float(C.sum()), float(r.cache.x[C].sum())]
    tot, neg = greg_total(y, d, _benchmark_rows(r.cache.x[A.index]), X)
    return r.y_B.sum(axis=0) + tot, {"negative_weights": neg}


def _takenone_B(r: ReplicateData):
    E = r.excluded["cutoff"] if "cutoff" in r.excluded else r.cache.band == 0
    return E, np.flatnonzero(E & r.big.delta)


def est_co_bd(r: ReplicateData):
    _, y, d, _ = r.A_parts("cutoff")
    _, BE = _takenone_B(r)
    diag = {"empty_takenone_overlap": int(BE.size == 0)}
    return ht_total(y, d) + r.y_obs[BE].sum(axis=0), diag


def _co_cal_kwfr(r: ReplicateData, corrected: bool):
    A, y, d, _ = r.A_parts("cutoff")
    E, BE = _takenone_B(r)
    F = ~E
    X = [float(F.sum()), float(r.cache.x[F].sum())]
    tot, neg = greg_total(y, d, _benchmark_rows(r.cache.x[A.index]), X)
    diag = {"negative_weights": neg, "empty_takenone_overlap": int(BE.size == 0)}
    if BE.size == 0:
        return tot, diag
    yE = r.corrected(BE, "cutoff") if corrected else r.y_obs[BE]
    pihat = r.frame_model.predict(r.cache.X_U[BE])
    return tot + hajek_ipw(yE, pihat, float(E.sum())), diag


def est_co_cal_kwfr(r: ReplicateData):
    return _co_cal_kwfr(r, corrected=False)


def est_co_cal_kwfr_cor(r: ReplicateData):
    return _co_cal_kwfr(r, corrected=True)


def est_auxdiv(r: ReplicateData):
    tot, missing = auxdiv_total(r.y_B, r.cache.industry[r.B], r.cache.x[r.B], r.cache.X_by_industry)
    return tot, {"divisions_without_big_data": missing}


def est_kwfr(r: ReplicateData):
    return hajek_ipw(r.y_B, r.frame_model.predict(r.X_B), r.cache.N), {}


def est_kw_cor(r: ReplicateData):
    return hajek_ipw(r.corrected(r.B, "single"), r.kw_pihat, r.cache.N), {}


def est_kw_cal_cor(r: ReplicateData):
    return _kw_cal(r, r.corrected(r.B, "single"))


def est_kwfr_cor(r: ReplicateData):
    return hajek_ipw(r.corrected(r.B, "single"), r.frame_model.predict(r.X_B), r.cache.N), {}


@dataclasses.dataclass(frozen=True)
class EstimatorSpec:
    func: Callable
    group: str  # report grouping
    needs: tuple  # reference-sample designs the estimator reads


ROSTER: dict[str, EstimatorSpec] = {
    "ht": EstimatorSpec(est_ht, "single", ("single",)),
    "greg": EstimatorSpec(est_greg, "single", ("single",)),
    "rdi": EstimatorSpec(est_rdi, "single", ("single",)),
    "qr_ma": EstimatorSpec(est_qr_ma, "single", ("single",)),
    "kw": EstimatorSpec(est_kw, "single", ("single",)),
    "kw_cal": EstimatorSpec(est_kw_cal, "single", ("single",)),
    "kw_earn": EstimatorSpec(est_kw_earn, "single", ("single",)),
    "alp": EstimatorSpec(est_alp, "single", ("single",)),
    "wgt_reg_mi": EstimatorSpec(est_wgt_reg_mi, "single", ("single",)),
    "dr_wgt": EstimatorSpec(est_dr_wgt, "single", ("single",)),
    "hd_mi": EstimatorSpec(est_hd_mi, "single", ("single",)),
    "sp": EstimatorSpec(est_sp, "dual_screening", ("dual_screening",)),
    "sp_cal": EstimatorSpec(est_sp_cal, "dual_screening", ("dual_screening",)),
    "co_bd": EstimatorSpec(est_co_bd, "cutoff", ("cutoff",)),
    "co_cal_kwfr": EstimatorSpec(est_co_cal_kwfr, "cutoff", ("cutoff",)),
    "auxdiv": EstimatorSpec(est_auxdiv, "big_data", ()),
    "kwfr": EstimatorSpec(est_kwfr, "big_data", ()),
    "kw_cor": EstimatorSpec(est_kw_cor, "single", ("single",)),
    "kw_cal_cor": EstimatorSpec(est_kw_cal_cor, "single", ("single",)),
    "co_cal_kwfr_cor": EstimatorSpec(est_co_cal_kwfr_cor, "cutoff", ("cutoff",)),
    "kwfr_cor": EstimatorSpec(est_kwfr_cor, "big_data", ("single",)),
}

GROUP_ORDER = ("single", "dual_screening", "cutoff", "big_data")


def evaluate(estimator_id: str, data: ReplicateData) -> EstimatorOutput:
    try:
        spec = ROSTER[estimator_id]
    except KeyError:
        raise EstimatorError(f"unknown estimator {estimator_id!r}") from None
    totals, diag = spec.func(data)
    return EstimatorOutput(estimator_id, np.asarray(totals, dtype=float).reshape(-1), diag)
