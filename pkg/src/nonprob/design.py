"""Stratified reference-sample designs and Bethel-Chromy allocation."""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

from .bigdata import BigDataset
from .population import INDUSTRIES, SIZE_BANDS, STATES, PopulationFrame

DESIGNS = ("single", "dual_screening", "cutoff")
TAKE_ALL_BAND = 3  # 300+


class DesignError(ValueError):
    pass


class InfeasibleConstraintsError(DesignError):
    pass


class AllocationConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Strata
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Strata:
    """Strata of a design frame, sorted by (state, industry, size band).

    ``labels`` maps every unit of the full population to its stratum index,
    or -1 for units outside the design frame.
    """

    state: np.ndarray
    industry: np.ndarray
    band: np.ndarray
    N_h: np.ndarray
    S_h: np.ndarray
    Y_h: np.ndarray
    labels: np.ndarray

    @property
    def H(self) -> int:
        return int(self.N_h.size)

    @property
    def take_all(self) -> np.ndarray:
        return self.band == TAKE_ALL_BAND

    def keys(self) -> list[tuple[str, str, str]]:
        return [(STATES[s], INDUSTRIES[d], SIZE_BANDS[b])
                for s, d, b in zip(self.state, self.industry, self.band)]

    @classmethod
    def from_arrays(cls, N_h, S_h, Y_h, state=None, industry=None, band=None) -> "Strata":
        """Strata without unit labels, for allocation problems built by hand."""
        N_h = np.asarray(N_h, dtype=np.int64)
        H = N_h.size
        zeros = np.zeros(H, dtype=np.int64)
        return cls(
            state=zeros if state is None else np.asarray(state),
            industry=zeros if industry is None else np.asarray(industry),
            band=zeros if band is None else np.asarray(band),
            N_h=N_h, S_h=np.asarray(S_h, dtype=float), Y_h=np.asarray(Y_h, dtype=float),
            labels=np.empty(0, dtype=np.int64),
        )


def stratify(frame: PopulationFrame, mask: np.ndarray | None = None) -> Strata:
    """Partition the units selected by ``mask`` (default: all) into strata.

    Stratum standard deviations use the N_h - 1 divisor (zero for singletons),
    computed on true earnings.
    """
    if mask is None:
        mask = np.ones(frame.N, dtype=bool)
    idx = np.flatnonzero(mask)
    labels = np.full(frame.N, -1, dtype=np.int64)
    if idx.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return Strata(empty, empty, empty, empty, np.empty(0), np.empty(0), labels)
    band = frame.size_band[idx]
    key = (frame.state[idx] * len(INDUSTRIES) + frame.industry[idx]) * len(SIZE_BANDS) + band
    uniq, inv = np.unique(key, return_inverse=True)
    labels[idx] = inv
    y = frame.earnings[idx]
    N_h = np.bincount(inv, minlength=uniq.size)
    Y_h = np.bincount(inv, weights=y, minlength=uniq.size)
    mean = Y_h / N_h
    ss = np.bincount(inv, weights=(y - mean[inv]) ** 2, minlength=uniq.size)
    S_h = np.sqrt(np.where(N_h > 1, ss / np.maximum(N_h - 1, 1), 0.0))
    state, rest = np.divmod(uniq, len(INDUSTRIES) * len(SIZE_BANDS))
    industry, band = np.divmod(rest, len(SIZE_BANDS))
    return Strata(state, industry, band, N_h.astype(np.int64), S_h, Y_h, labels)


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ConstraintSpec:
    domain: str  # national | industry | state
    target_rse: float
    value: str | None = None

    def __post_init__(self):
        if self.domain not in ("national", "industry", "state"):
            raise DesignError(f"unknown constraint domain {self.domain!r}")
        if not self.target_rse > 0:
            raise DesignError(f"target_rse must be positive, got {self.target_rse}")
        if self.domain != "national" and self.value is None:
            raise DesignError(f"{self.domain} constraint needs a value")

    @property
    def label(self) -> str:
        return self.domain if self.value is None else f"{self.domain}:{self.value}"

    def member(self, strata: Strata) -> np.ndarray:
        if self.domain == "national":
            return np.ones(strata.H, dtype=bool)
        if self.domain == "industry":
            return strata.industry == INDUSTRIES.index(self.value)
        return strata.state == STATES.index(self.value)


def default_constraints(national: float = 0.015, industry: float = 0.05,
                        state: float = 0.05) -> list[ConstraintSpec]:
    return ([ConstraintSpec("national", national)]
            + [ConstraintSpec("industry", industry, d) for d in INDUSTRIES]
            + [ConstraintSpec("state", state, s) for s in STATES])


def parse_constraints(raw: Iterable[dict]) -> list[ConstraintSpec]:
    """``{"domain": "industry", "rse": 0.05}`` expands to every industry;
    ``{"domain": "industry:B", ...}`` names one."""
    out = []
    for item in raw:
        if set(item) - {"domain", "rse"}:
            raise DesignError(f"unknown constraint keys {sorted(set(item) - {'domain', 'rse'})}")
        domain, _, value = str(item["domain"]).partition(":")
        rse = float(item["rse"])
        if domain == "national":
            out.append(ConstraintSpec("national", rse))
        elif value:
            out.append(ConstraintSpec(domain, rse, value))
        elif domain == "industry":
            out.extend(ConstraintSpec("industry", rse, d) for d in INDUSTRIES)
        elif domain == "state":
            out.extend(ConstraintSpec("state", rse, s) for s in STATES)
        else:
            raise DesignError(f"unknown constraint domain {domain!r}")
    return out


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Allocation:
    n_h: np.ndarray
    strata: Strata
    constraints: list[ConstraintSpec]
    continuous: np.ndarray
    iterations: int

    @property
    def total_n(self) -> int:
        return int(self.n_h.sum())

    def anticipated_rse(self) -> np.ndarray:
        return anticipated_rse(self.strata, self.constraints, self.n_h)


def _variance_terms(strata: Strata, constraints: Sequence[ConstraintSpec]):
    member = np.array([c.member(strata) for c in constraints], dtype=bool).reshape(
        len(constraints), strata.H)
    a = member * (strata.N_h.astype(float) ** 2 * strata.S_h ** 2)
    fpc = member @ (strata.N_h * strata.S_h ** 2)
    Y = member @ strata.Y_h
    rse = np.array([c.target_rse for c in constraints])
    return member, a, fpc, Y, rse


def anticipated_variance(strata: Strata, constraints, n_h) -> np.ndarray:
    _, a, fpc, _, _ = _variance_terms(strata, constraints)
    n = np.asarray(n_h, dtype=float)
    with np.errstate(divide="ignore"):
        inv = np.where(n > 0, 1.0 / np.maximum(n, 1e-300), np.inf)
    return np.maximum(a @ inv - fpc, 0.0)


def anticipated_rse(strata: Strata, constraints, n_h) -> np.ndarray:
    _, _, _, Y, _ = _variance_terms(strata, constraints)
    var = anticipated_variance(strata, constraints, n_h)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(Y > 0, np.sqrt(var) / np.where(Y > 0, Y, 1.0),
                        np.where(var > 0, np.inf, 0.0))


def bethel_chromy_allocate(strata: Strata, constraints: Sequence[ConstraintSpec], min_n: int = 6,
                           tol: float = 1e-10, max_iter: int = 10_000) -> Allocation:
    """Minimum total sample size meeting every RSE constraint on earnings totals.

    Continuous optimum by Chromy's multiplicative update of the Lagrange
    multipliers, then integer rounding with min-n / take-all rules, a repair
    pass for broken constraints and a trim pass that removes surplus units.
    """
    constraints = [c for c in constraints if c.member(strata).any()]
    N = strata.N_h.astype(float)
    fixed = strata.take_all | (strata.N_h <= min_n)
    lo = np.where(fixed, N, np.minimum(min_n, N))
    hi = N.copy()
    member, a, fpc, Y, rse = _variance_terms(strata, constraints)
    # constraint: sum_h a_jh / n_h <= cap_j
    cap = (rse * Y) ** 2 + fpc
    free = ~fixed
    a_free = a[:, free]
    cap_free = cap - a[:, fixed] @ (1.0 / np.maximum(N[fixed], 1))
    if (cap_free < -1e-9 * np.maximum(cap, 1)).any():
        raise InfeasibleConstraintsError("constraints unattainable even with a census")

    n_cont = hi.copy()
    iters = 0
    if free.any() and len(constraints):
        n_cont[free], iters = _chromy(a_free, cap_free, lo[free], hi[free], tol, max_iter)

    n = np.clip(np.ceil(n_cont - 1e-9), lo, hi)
    n = _repair(n, a, cap, lo, hi)
    n = _trim(n, a, cap, lo)
    if strata.H <= 40:
        n = _pair_polish(n, a, cap, lo, hi)
    return Allocation(n.astype(np.int64), strata, list(constraints), n_cont, iters)


def _chromy(a, cap, lo, hi, tol, max_iter):
    """Continuous optimum and iteration count.

    Stops when the point is feasible to ``tol`` and the duality gap
    sum_j lam_j (cap_j - g_j) is at most ``tol`` times the objective. Every 25
    steps a Newton polish of the active multipliers is tried and kept only if
    it passes the same test, which rescues the slow tail of the fixed point.
    """
    active = a.sum(axis=1) > 0
    lam = np.zeros(a.shape[0])
    # single-constraint solutions as the starting point
    root = np.sqrt(a).sum(axis=1)
    lam[active] = (root[active] / cap[active]) ** 2

    def n_of(lam):
        return np.clip(np.sqrt(lam @ a), lo, hi)

    def converged(lam):
        n = n_of(lam)
        g = a @ (1.0 / n)
        ok = (g <= cap * (1 + tol)).all() and abs(lam @ (cap - g)) <= tol * n.sum()
        return ok, n, g

    n = n_of(lam)
    for it in range(1, max_iter + 1):
        ok, n, g = converged(lam)
        if ok:
            return n, it
        ratio = g / cap
        lam = lam * np.minimum(ratio, 1e6) ** 2
        lam[~active] = 0.0
        n_new = n_of(lam)
        if np.all(np.abs(n_new - n) <= 1e-12 * n) and (ratio > 1 + tol).any():
            # violated constraints whose strata all sit at a bound: the
            # multiplicative step crawls, so jump to the next breakpoint
            lam = _jump(lam, a, lo, ratio)
        if it % 25 == 0:
            cand = _newton_polish(lam, a, cap, lo, hi)
            ok, n, _ = converged(cand)
            if ok:
                return n, it
    raise AllocationConvergenceError(f"Bethel-Chromy iteration did not converge in {max_iter} steps")


def _newton_polish(lam, a, cap, lo, hi):
    """Active-set Newton solve of g_j(lam) = cap_j on the binding constraints."""
    lam = lam.copy()
    g = a @ (1.0 / np.clip(np.sqrt(lam @ a), lo, hi))
    J = (lam > 0) & (g > cap * (1 - 1e-3))
    lam[~J] = 0.0
    for _ in range(2 * cap.size + 2):
        lam = _newton_equalities(lam, J, a, cap, lo, hi)
        g = a @ (1.0 / np.clip(np.sqrt(lam @ a), lo, hi))
        # slack after the solve: either the multiplier wants to go negative or
        # it acts only on clipped strata; both mean it should be zero
        drop = J & (g < cap * (1 - 1e-12))
        if drop.any():
            J &= ~drop
            lam[drop] = 0.0
            continue
        viol = np.where(~J & (a.sum(axis=1) > 0), g / cap - 1, 0.0)
        if viol.max() > 1e-12:
            j = int(np.argmax(viol))
            J[j] = True
            lam[j] = max(1e-6 * lam.max(), 1e-300)
            continue
        break
    return lam


def _newton_equalities(lam, J, a, cap, lo, hi, steps: int = 50):
    idx = np.flatnonzero(J)
    for _ in range(steps):
        s = lam @ a
        r = np.sqrt(s)
        free = (r > lo) & (r < hi)
        if idx.size == 0 or not free.any():
            break
        resid = a[idx] @ (1.0 / np.clip(r, lo, hi)) - cap[idx]
        if np.all(np.abs(resid) <= 1e-14 * cap[idx]):
            break
        af = a[idx][:, free]
        M = -0.5 * (af * s[free] ** -1.5) @ af.T
        new = lam[idx] + np.linalg.lstsq(M, -resid, rcond=None)[0]
        lam[idx] = np.where(new > 0, new, lam[idx] / 10)
    return lam


def _jump(lam, a, lo, ratio):
    s = lam @ a
    at_lo = np.sqrt(s) <= lo
    for j in np.flatnonzero(ratio > 1 + 1e-8):
        cand = at_lo & (a[j] > 0)
        if not cand.any():
            continue
        need = (lo[cand] ** 2 - (s[cand] - lam[j] * a[j, cand])) / a[j, cand]
        need = need[need > lam[j]]
        if need.size:
            lam[j] = need.min() * (1 + 1e-12)
            s = lam @ a
            at_lo = np.sqrt(s) <= lo
    return lam


def _violations(n, a, cap):
    g = a @ (1.0 / n)
    return g - cap * (1 + 1e-12)


def _repair(n, a, cap, lo, hi):
    n = n.copy()
    while True:
        v = _violations(n, a, cap)
        if (v <= 0).all():
            return n
        j = int(np.argmax(v / np.maximum(cap, 1e-300)))
        gain = a[j] * (1.0 / n - 1.0 / np.minimum(n + 1, hi + 1))
        gain[n >= hi] = -1
        h = int(np.argmax(gain))
        if gain[h] <= 0:
            raise InfeasibleConstraintsError(f"cannot repair constraint {j} after rounding")
        n[h] += 1


def _trim(n, a, cap, lo):
    n = n.copy()
    g = a @ (1.0 / n)
    while True:
        cand = np.flatnonzero(n > lo)
        if cand.size == 0:
            return n
        # variance increase of each candidate decrement per constraint
        step = a[:, cand] * (1.0 / (n[cand] - 1) - 1.0 / n[cand])
        slack = (cap * (1 + 1e-12) - g)[:, None]
        ok = (step <= slack).all(axis=0)
        if not ok.any():
            return n
        with np.errstate(divide="ignore", invalid="ignore"):
            use = np.where(step > 0, step / np.maximum(slack, 1e-300), 0.0).max(axis=0)
        use[~ok] = np.inf
        k = int(np.argmin(use))
        h = cand[k]
        g = g + step[:, k]
        n[h] -= 1


def _pair_polish(n, a, cap, lo, hi):
    """Exact two-stratum re-optimisation, repeated until no pair improves."""
    n = n.copy()
    H = n.size
    improved = True
    while improved:
        improved = False
        for h in range(H):
            for k in range(H):
                if h == k or n[k] <= lo[k]:
                    continue
                best = _best_pair(n, h, k, a, cap, lo, hi)
                if best is not None:
                    n[h], n[k] = best
                    improved = True
    return n


def _best_pair(n, h, k, a, cap, lo, hi):
    base = a @ (1.0 / n) - a[:, h] / n[h] - a[:, k] / n[k]
    room = cap * (1 + 1e-12) - base
    current = n[h] + n[k]
    best = None
    for nh in range(int(n[h]), int(hi[h]) + 1):
        rem = room - a[:, h] / nh
        need = lo[k]
        bad = False
        for j in np.flatnonzero(a[:, k] > 0):
            if rem[j] <= 0:
                bad = True
                break
            need = max(need, np.ceil(a[j, k] / rem[j] - 1e-9))
        if bad or (rem[a[:, k] == 0] < 0).any() or need > hi[k]:
            continue
        nk = need
        while nk > lo[k] and (a[:, k] / (nk - 1) <= rem).all():
            nk -= 1
        while not (a[:, k] / nk <= rem).all():
            nk += 1
        if nh + nk < current:
            current = nh + nk
            best = (nh, int(nk))
        if nh - n[h] >= current - lo[k]:
            break
    return best


# ---------------------------------------------------------------------------
# Design frames and sampling
# ---------------------------------------------------------------------------


def build_design_frame(frame: PopulationFrame, big: BigDataset | None,
                       design: str) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks (sampling frame, excluded part) over U."""
    if design == "single":
        return np.ones(frame.N, dtype=bool), np.zeros(frame.N, dtype=bool)
    if design == "dual_screening":
        if big is None:
            raise DesignError("dual-frame design needs the big dataset's membership")
        return ~big.delta, big.delta.copy()
    if design == "cutoff":
        excluded = frame.size_band == 0
        return ~excluded, excluded
    raise DesignError(f"unknown design {design!r}; expected one of {DESIGNS}")


@dataclasses.dataclass
class WeightedSample:
    """Reference sample A: positions into U with design weights."""

    index: np.ndarray
    weight: np.ndarray
    stratum: np.ndarray

    @property
    def n(self) -> int:
        return int(self.index.size)

    @property
    def pi(self) -> np.ndarray:
        return 1.0 / self.weight

    def delta(self, big: BigDataset) -> np.ndarray:
        """Linkage flags: membership in B for each sampled unit."""
        return big.delta[self.index]


def draw_stratified_sample(strata: Strata, allocation: Allocation | np.ndarray,
                           rng: np.random.Generator) -> WeightedSample:
    """SRSWOR of n_h units in every stratum."""
    n_h = allocation.n_h if isinstance(allocation, Allocation) else np.asarray(allocation)
    if (n_h > strata.N_h).any():
        raise DesignError("allocation exceeds stratum size")
    units = np.flatnonzero(strata.labels >= 0)
    lab = strata.labels[units]
    keys = rng.random(units.size)
    order = np.lexsort((keys, lab))
    units, lab = units[order], lab[order]
    start = np.concatenate(([0], np.cumsum(strata.N_h)[:-1]))
    rank = np.arange(units.size) - start[lab]
    take = rank < n_h[lab]
    idx, lab = units[take], lab[take]
    weight = strata.N_h[lab] / n_h[lab]
    return WeightedSample(index=idx, weight=weight.astype(float), stratum=lab)
