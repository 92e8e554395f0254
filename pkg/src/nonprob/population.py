"""Synthetic business population.

Frame and reported employment are drawn per (size group, industry) cell with
the Vale-Maurelli extension of Fleishman's power method; wages, overtime and
the error-contaminated copies of the survey variables are layered on top.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
from scipy import optimize

STATES = ("NSW", "VIC", "QLD", "SA", "WA", "TAS", "NT", "ACT")
INDUSTRIES = tuple("BCDEFGHIJKLMNOPQRS")
SIZE_GROUPS = (
    "0-4", "5-19", "20-49", "50-99", "100-149", "150-199", "200-249",
    "249-299", "300-349", "349-399", "400-449", "449-499", "500-999", "1000+",
)
SIZE_BANDS = ("0-4", "5-19", "20-299", "300+")
VARIABLES = ("earn", "emp", "ovt")

CSV_COLUMNS = (
    "unit_id", "state", "industry_division", "size_group", "frame_employment",
    "reported_employment", "earnings", "overtime", "earnings_star", "emp_star",
    "ovt_star",
)


class PopulationError(ValueError):
    """Invalid population configuration or file."""


class InfeasibleMomentsError(PopulationError):
    pass


class NoConvergenceError(RuntimeError):
    pass


class IntermediateCorrelationError(PopulationError):
    pass


class SchemaError(PopulationError):
    pass


# ---------------------------------------------------------------------------
# Power method
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MomentSpec:
    mean: float
    variance: float
    skewness: float
    kurtosis: float  # excess

    def __post_init__(self):
        if not self.variance > 0:
            raise PopulationError(f"variance must be positive, got {self.variance}")

    @property
    def sd(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def feasible(self) -> bool:
        return self.skewness**2 <= self.kurtosis + 2

    @classmethod
    def from_mapping(cls, m: Mapping[str, float]) -> "MomentSpec":
        return cls(float(m["mean"]), float(m["variance"]), float(m["skewness"]),
                   float(m["kurtosis"]))


@dataclasses.dataclass(frozen=True)
class FleishmanCoeffs:
    a: float
    b: float
    c: float
    d: float

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.a + z * (self.b + z * (self.c + z * self.d))


def _fleishman_equations(p, skew, kurt):
    b, c, d = p
    return np.array([
        b * b + 6 * b * d + 2 * c * c + 15 * d * d - 1,
        2 * c * (b * b + 24 * b * d + 105 * d * d + 2) - skew,
        24 * (b * d + c * c * (1 + b * b + 28 * b * d)
              + d * d * (12 + 48 * b * d + 141 * c * c + 225 * d * d)) - kurt,
    ])


def _fleishman_jacobian(p, skew, kurt):
    b, c, d = p
    return np.array([
        [2 * b + 6 * d, 4 * c, 6 * b + 30 * d],
        [2 * c * (2 * b + 24 * d), 2 * (b * b + 24 * b * d + 105 * d * d + 2),
         2 * c * (24 * b + 210 * d)],
        [24 * (d + c * c * (2 * b + 28 * d) + 48 * d**3),
         24 * (2 * c * (1 + b * b + 28 * b * d) + 282 * c * d * d),
         24 * (b + 28 * b * c * c + 24 * d + 144 * b * d * d + 282 * c * c * d
               + 900 * d**3)],
    ])


_FLEISHMAN_STARTS = ((1.0, 0.0, 0.0), (0.9, 0.1, 0.05), (0.8, 0.2, 0.1), (0.5, 0.3, 0.15))


def solve_fleishman(spec: MomentSpec, tol: float = 1e-9) -> FleishmanCoeffs:
    """Power-method coefficients for the standardized version of ``spec``.

    Raises:
        InfeasibleMomentsError: skewness/kurtosis outside the power-method region.
        NoConvergenceError: no start point reached a residual below ``tol``.
    """
    if not spec.feasible:
        raise InfeasibleMomentsError(
            f"skewness^2={spec.skewness**2:.4g} exceeds kurtosis+2={spec.kurtosis + 2:.4g}")
    skew, kurt = spec.skewness, spec.kurtosis
    if skew == 0 and kurt == 0:
        return FleishmanCoeffs(0.0, 1.0, 0.0, 0.0)
    best = None
    for start in _FLEISHMAN_STARTS:
        sol = optimize.root(_fleishman_equations, start, args=(skew, kurt),
                            jac=_fleishman_jacobian, method="hybr",
                            options={"xtol": 1e-14, "maxfev": 2000})
        b, c, d = sol.x
        res = float(np.linalg.norm(_fleishman_equations(sol.x, skew, kurt)))
        if res <= tol and b > 0:
            return FleishmanCoeffs(-c, float(b), float(c), float(d))
        if best is None or res < best:
            best = res
    raise NoConvergenceError(
        f"power-method solve for skew={skew}, kurt={kurt} stalled at residual {best:.3g}")


def fleishman_moments(coeffs: FleishmanCoeffs) -> tuple[float, float, float, float]:
    """Analytic (mean, variance, skewness, excess kurtosis) of a + bZ + cZ^2 + dZ^3."""
    poly = np.polynomial.Polynomial([coeffs.a, coeffs.b, coeffs.c, coeffs.d])

    def expect(p):
        # E[Z^k] = (k-1)!! for even k, 0 for odd k
        k = np.arange(p.coef.size)
        zk = np.where(k % 2 == 0, [_double_factorial(i - 1) for i in k], 0.0)
        return float(np.dot(p.coef, zk))

    mean = expect(poly)
    centred = poly - mean
    var = expect(centred**2)
    return mean, var, expect(centred**3) / var**1.5, expect(centred**4) / var**2 - 3.0


def _double_factorial(k: int) -> float:
    return float(np.prod(np.arange(k, 0, -2))) if k > 0 else 1.0


def intermediate_correlation(cx: FleishmanCoeffs, cy: FleishmanCoeffs, rho: float) -> float:
    """Normal-scale correlation that maps to ``rho`` after both transforms."""
    b1, c1, d1 = cx.b, cx.c, cx.d
    b2, c2, d2 = cy.b, cy.c, cy.d
    poly = [6 * d1 * d2, 2 * c1 * c2, b1 * b2 + 3 * b1 * d2 + 3 * d1 * b2 + 9 * d1 * d2, -rho]
    roots = np.roots(poly)
    real = roots[np.abs(roots.imag) < 1e-10].real
    ok = real[np.abs(real) <= 1.0]
    if ok.size == 0:
        raise IntermediateCorrelationError(
            f"no intermediate correlation in [-1, 1] for target correlation {rho:.4f}")
    return float(ok[np.argmin(np.abs(ok - rho))])


def vale_maurelli_pair(spec_x: MomentSpec, spec_y: MomentSpec, target_cov: float, n: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` correlated non-normal pairs with the given marginal moments."""
    rho = target_cov / (spec_x.sd * spec_y.sd)
    if not abs(rho) < 1:
        raise IntermediateCorrelationError(f"target correlation {rho:.4f} is not in (-1, 1)")
    cx, cy = solve_fleishman(spec_x), solve_fleishman(spec_y)
    r = intermediate_correlation(cx, cy, rho)
    if n == 0:
        return np.empty(0), np.empty(0)
    z1 = rng.standard_normal(n)
    z2 = r * z1 + np.sqrt(1.0 - r * r) * rng.standard_normal(n)
    return spec_x.mean + spec_x.sd * cx(z1), spec_y.mean + spec_y.sd * cy(z2)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {"n", "proportions", "moments", "wage_factors", "wage_variances", "overtime",
                "measurement_error", "seed", "wages"}


@dataclasses.dataclass
class MEConfig:
    factor_mean: float = 0.85
    factor_variance: float = 0.025
    contamination_rate: float = 0.02
    contamination_low: float = 0.4
    contamination_high: float = 0.6


@dataclasses.dataclass
class PopulationConfig:
    """Inputs to :func:`synthesize_population`.

    ``size_props`` is indexed by size group; ``industry_props`` and ``state_props``
    are (size groups x categories) so either may vary by size group.
    """

    n: int
    size_props: np.ndarray
    industry_props: np.ndarray
    state_props: np.ndarray
    moments: dict[str, tuple[MomentSpec, MomentSpec, float]]
    wage_factors: np.ndarray
    v_e: np.ndarray
    v_s: np.ndarray
    overtime_prob: np.ndarray
    overtime_factor_mean: float = 0.1
    me: MEConfig = dataclasses.field(default_factory=MEConfig)
    base_wage: float = 1740.0
    variance_as_sd: bool = False
    swap_variances: bool = False
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PopulationConfig":
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise PopulationError(f"unknown population config keys: {sorted(unknown)}")
        missing = {"n", "proportions", "moments", "wage_factors", "wage_variances"} - set(raw)
        if missing:
            raise PopulationError(f"missing population config keys: {sorted(missing)}")
        props = raw["proportions"]
        size_props = _vector(props.get("size_group"), SIZE_GROUPS, "proportions.size_group")
        industry_props = _by_size(props.get("industry"), INDUSTRIES, "proportions.industry")
        state_props = _by_size(props.get("state"), STATES, "proportions.state")
        _check_sums(size_props[None, :], "proportions.size_group")
        _check_sums(industry_props, "proportions.industry")
        _check_sums(state_props, "proportions.state")

        moments = {}
        for g in SIZE_GROUPS:
            try:
                row = raw["moments"][g]
                moments[g] = (MomentSpec.from_mapping(row["frame"]),
                              MomentSpec.from_mapping(row["reported"]), float(row["covariance"]))
            except KeyError as exc:
                raise PopulationError(f"moments.{g}: missing entry {exc}") from None

        wv = raw["wage_variances"]
        for g in SIZE_GROUPS:
            if g not in wv or not {"v_e", "v_s"} <= set(wv[g]):
                raise PopulationError(f"wage_variances.{g}: missing v_e/v_s")
        overtime = raw.get("overtime", {})
        if "probability" in overtime:
            ot_prob = _vector(overtime["probability"], INDUSTRIES, "overtime.probability")
        else:
            ot_prob = np.linspace(0.1, 0.5, len(INDUSTRIES))
        wages = raw.get("wages", {})
        return cls(
            n=int(raw["n"]),
            size_props=size_props,
            industry_props=industry_props,
            state_props=state_props,
            moments=moments,
            wage_factors=_vector(raw["wage_factors"], INDUSTRIES, "wage_factors"),
            v_e=np.array([float(wv[g]["v_e"]) for g in SIZE_GROUPS]),
            v_s=np.array([float(wv[g]["v_s"]) for g in SIZE_GROUPS]),
            overtime_prob=ot_prob,
            overtime_factor_mean=float(overtime.get("factor_mean", 0.1)),
            me=MEConfig(**raw.get("measurement_error", {})),
            base_wage=float(wages.get("base", 1740.0)),
            variance_as_sd=bool(wages.get("variance_as_sd", False)),
            swap_variances=bool(wages.get("swap_variances", False)),
            seed=int(raw.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, path) -> "PopulationConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.size_props, self.industry_props, self.state_props, self.wage_factors,
                    self.v_e, self.v_s, self.overtime_prob):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(repr((self.n, sorted(self.moments.items()), self.overtime_factor_mean,
                       dataclasses.astuple(self.me), self.base_wage, self.variance_as_sd,
                       self.swap_variances)).encode())
        return h.hexdigest()[:16]


def default_config_dict() -> dict:
    text = resources.files("nonprob").joinpath("data/default_population.json").read_text()
    return json.loads(text)


def default_config(n: int | None = None, **overrides) -> PopulationConfig:
    raw = default_config_dict()
    if n is not None:
        raw["n"] = n
    raw.update(overrides)
    return PopulationConfig.from_dict(raw)


def _vector(mapping, keys, name) -> np.ndarray:
    if not isinstance(mapping, Mapping):
        raise PopulationError(f"{name}: expected a mapping keyed by {keys[0]}..{keys[-1]}")
    missing = [k for k in keys if k not in mapping]
    if missing:
        raise PopulationError(f"{name}: missing entries {missing}")
    extra = set(mapping) - set(keys)
    if extra:
        raise PopulationError(f"{name}: unknown entries {sorted(extra)}")
    return np.array([float(mapping[k]) for k in keys])


def _by_size(mapping, keys, name) -> np.ndarray:
    """Flat mapping (shared by all size groups) or one mapping per size group."""
    if isinstance(mapping, Mapping) and mapping and set(mapping) <= set(SIZE_GROUPS):
        return np.vstack([_vector(mapping.get(g), keys, f"{name}.{g}") for g in SIZE_GROUPS])
    return np.tile(_vector(mapping, keys, name), (len(SIZE_GROUPS), 1))


def _check_sums(arr: np.ndarray, name: str) -> None:
    if (arr < 0).any():
        raise PopulationError(f"{name}: negative proportion")
    bad = np.abs(arr.sum(axis=1) - 1.0) > 1e-9
    if bad.any():
        raise PopulationError(f"{name}: proportions sum to {arr.sum(axis=1)[bad][0]!r}, not 1")


# ---------------------------------------------------------------------------
# Frame
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class PopulationFrame:
    """Column store of the finite population; categorical columns hold codes."""

    unit_id: np.ndarray
    state: np.ndarray
    industry: np.ndarray
    size_group: np.ndarray
    frame_employment: np.ndarray
    reported_employment: np.ndarray
    earnings: np.ndarray
    overtime: np.ndarray
    earnings_star: np.ndarray
    emp_star: np.ndarray
    ovt_star: np.ndarray
    provenance: str = ""

    @property
    def N(self) -> int:
        return int(self.unit_id.size)

    def __len__(self) -> int:
        return self.N

    @property
    def size_band(self) -> np.ndarray:
        """0-4, 5-19, 20-299, 300+ on frame employment, as codes 0..3."""
        return np.searchsorted([5, 20, 300], self.frame_employment, side="right")

    def y(self, starred: bool = False) -> np.ndarray:
        """(N, 3) matrix of earn, emp, ovt."""
        if starred:
            cols = (self.earnings_star, self.emp_star, self.ovt_star)
        else:
            cols = (self.earnings, self.reported_employment.astype(float), self.overtime)
        return np.column_stack(cols)

    def totals(self, starred: bool = False) -> np.ndarray:
        return self.y(starred).sum(axis=0)

    def subset(self, mask: np.ndarray) -> "PopulationFrame":
        fields = {f.name: getattr(self, f.name)[mask]
                  for f in dataclasses.fields(self) if f.name != "provenance"}
        return PopulationFrame(**fields, provenance=self.provenance)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "unit_id": self.unit_id,
            "state": np.asarray(STATES)[self.state],
            "industry_division": np.asarray(INDUSTRIES)[self.industry],
            "size_group": np.asarray(SIZE_GROUPS)[self.size_group],
            "frame_employment": self.frame_employment,
            "reported_employment": self.reported_employment,
            "earnings": self.earnings,
            "overtime": self.overtime,
            "earnings_star": self.earnings_star,
            "emp_star": self.emp_star,
            "ovt_star": self.ovt_star,
        })


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def largest_remainder(n: int, props: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``n``; ties go to the lower index."""
    raw = n * np.asarray(props, dtype=float)
    base = np.floor(raw).astype(np.int64)
    short = n - int(base.sum())
    if short > 0:
        order = np.lexsort((np.arange(raw.size), -(raw - base)))
        base[order[:short]] += 1
    return base


def cell_rng(seed: int, cell: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cell,)))


def synthesize_population(config: PopulationConfig, seed: int | None = None) -> PopulationFrame:
    """Generate the full population; each cell draws from its own seed stream."""
    seed = config.seed if seed is None else seed
    n_ind = len(INDUSTRIES)
    cell_props = (config.size_props[:, None] * config.industry_props).ravel()
    counts = largest_remainder(config.n, cell_props)

    v_factor, v_noise = config.v_s, config.v_e
    if config.swap_variances:
        v_factor, v_noise = v_noise, v_factor
    # Normal(mu, v): v is a variance unless variance_as_sd
    sd_factor = v_factor if config.variance_as_sd else np.sqrt(v_factor)
    noise_scale = (lambda x, v: v * np.sqrt(x)) if config.variance_as_sd else (
        lambda x, v: np.sqrt(v * x))
    me = config.me
    me_sd = me.factor_variance if config.variance_as_sd else np.sqrt(me.factor_variance)

    parts = []
    for cell, count in enumerate(counts):
        if count == 0:
            continue
        g, d = divmod(cell, n_ind)
        rng = cell_rng(seed, cell)
        spec_x, spec_y, cov = config.moments[SIZE_GROUPS[g]]
        fx, fy = vale_maurelli_pair(spec_x, spec_y, cov, int(count), rng)
        x = np.maximum(_round_half_away(fx), 0).astype(np.int64)
        x_rep = np.maximum(_round_half_away(fy), 0).astype(np.int64)
        state = rng.choice(len(STATES), size=count, p=config.state_props[g])

        factor = config.wage_factors[d] + sd_factor[g] * rng.standard_normal(count)
        eps = noise_scale(x.astype(float), v_noise[g]) * rng.standard_normal(count)
        earn = np.maximum(config.base_wage * factor * x_rep + eps, 0.0)

        has_ot = rng.random(count) < config.overtime_prob[d]
        ot_factor = np.minimum(rng.exponential(config.overtime_factor_mean, count), 1.0)
        ovt = np.where(has_ot, ot_factor * earn, 0.0)

        err = me.factor_mean + me_sd * rng.standard_normal(count)
        hit = rng.random(count) < me.contamination_rate
        err = np.where(hit, err * rng.uniform(me.contamination_low, me.contamination_high, count),
                       err)
        parts.append((np.full(count, g), np.full(count, d), state, x, x_rep, earn, ovt, err))

    cols = [np.concatenate(c) for c in zip(*parts)]
    g, d, state, x, x_rep, earn, ovt, err = cols
    n = x.size
    return PopulationFrame(
        unit_id=np.arange(1, n + 1, dtype=np.int64),
        state=state.astype(np.int64),
        industry=d.astype(np.int64),
        size_group=g.astype(np.int64),
        frame_employment=x,
        reported_employment=x_rep,
        earnings=earn,
        overtime=ovt,
        earnings_star=earn * err,
        emp_star=x_rep * err,
        ovt_star=ovt * err,
        provenance=f"synthesized(seed={seed}, config={config.fingerprint()})",
    )


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def save_population(frame: PopulationFrame, path) -> None:
    frame.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _codes(col: pd.Series, levels: tuple[str, ...], name: str) -> np.ndarray:
    cat = pd.Categorical(col.astype(str), categories=levels)
    if (cat.codes < 0).any():
        bad = col[cat.codes < 0].iloc[0]
        raise SchemaError(f"column {name!r}: unknown level {bad!r}")
    return cat.codes.astype(np.int64)


def load_population(path) -> PopulationFrame:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    numeric = {}
    for col in ("unit_id", "frame_employment", "reported_employment", "earnings", "overtime",
                "earnings_star", "emp_star", "ovt_star"):
        values = pd.to_numeric(df[col], errors="coerce")
        if values.isna().any():
            row = int(values.isna().to_numpy().argmax())
            raise SchemaError(f"{path}: non-numeric value {df[col].iloc[row]!r} in column {col!r}")
        # to_numeric is not correctly rounded; numpy's parser is, so saved floats round-trip
        numeric[col] = df[col].to_numpy(dtype=str).astype(float)
    ids = numeric["unit_id"].astype(np.int64)
    if len(np.unique(ids)) != ids.size:
        raise SchemaError(f"{path}: duplicate unit_id")
    return PopulationFrame(
        unit_id=ids,
        state=_codes(df["state"], STATES, "state"),
        industry=_codes(df["industry_division"], INDUSTRIES, "industry_division"),
        size_group=_codes(df["size_group"], SIZE_GROUPS, "size_group"),
        frame_employment=numeric["frame_employment"].astype(np.int64),
        reported_employment=numeric["reported_employment"].astype(np.int64),
        earnings=numeric["earnings"].astype(float),
        overtime=numeric["overtime"].astype(float),
        earnings_star=numeric["earnings_star"].astype(float),
        emp_star=numeric["emp_star"].astype(float),
        ovt_star=numeric["ovt_star"].astype(float),
        provenance=f"ingested(sha256={_file_hash(path)})",
    )
