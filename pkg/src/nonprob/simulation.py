"""Monte Carlo driver: scenarios, replicates, RB/RRMSE aggregation and reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .bigdata import SNAR_PHI, SAR_PHI, SelectionModel, draw_big_dataset, selection_probabilities
from .design import (DESIGNS, bethel_chromy_allocate, build_design_frame,
                     default_constraints, draw_stratified_sample, parse_constraints, stratify)
from .estimators import GROUP_ORDER, ROSTER, FrameCache, ReplicateData, evaluate
from .population import (PopulationConfig, PopulationFrame, default_config, load_population,
                         synthesize_population)

OUTPUT_VARIABLES = ("earn", "emp", "ovt", "awe")
RESULT_COLUMNS = ("scenario", "design", "estimator", "variable", "rb", "rrmse",
                  "n_replicates", "n_failures")
SCALES = {"desk": {"n": 90_000, "replicates": 200}, "full": {"n": 900_000, "replicates": 2_000}}
# stream labels folded into each replicate's seed; part of the reproducibility contract
STREAMS = {"big_data": 1, "single": 2, "dual_screening": 3, "cutoff": 4, "hot_deck": 5}

_TOP_KEYS = {"scenario", "scenarios", "selection_model", "designs", "estimators", "replicates",
             "seed", "population", "constraints", "min_stratum_n", "mi_weights",
             "kw_cal_benchmarks"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Scenario:
    name: str
    missingness: str  # SAR | SNAR
    measurement_error: bool
    phi: tuple[float, float, float]


@dataclasses.dataclass
class ScenarioConfig:
    scenarios: list[Scenario]
    designs: list[str]
    estimators: list[str]
    replicates: int
    seed: int
    population: dict
    downweights: dict | None = None
    constant_pi: float | None = None
    constraints: list = dataclasses.field(default_factory=default_constraints)
    min_stratum_n: int = 6
    mi_weights: str = "design"  # or "calibrated", for the imputation estimators
    kw_cal_benchmarks: str = "frame"  # or "estimated" (HT totals from A)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: Path | str = ".") -> "ScenarioConfig":
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sel = dict(raw.get("selection_model", {}))
        bad = set(sel) - {"phi", "downweights", "use_starred", "constant_pi"}
        if bad:
            raise ConfigError(f"unknown selection_model keys: {sorted(bad)}")
        if "scenario" in raw and "scenarios" in raw:
            raise ConfigError("give either 'scenario' or 'scenarios', not both")
        items = raw.get("scenarios", [raw.get("scenario", {"missingness": "SAR"})])
        if isinstance(items, Mapping):
            items = [items]
        scenarios = [_scenario(s, sel) for s in items]
        if len({s.name for s in scenarios}) != len(scenarios):
            raise ConfigError("scenario names must be unique")
        designs = list(raw.get("designs", DESIGNS))
        for d in designs:
            if d not in DESIGNS:
                raise ConfigError(f"designs: unknown design {d!r}")
        estimators = list(raw.get("estimators", [k for k in ROSTER if k != "ht"]))
        if not estimators:
            raise ConfigError("estimators: roster must not be empty")
        for e in estimators:
            if e not in ROSTER:
                raise ConfigError(f"estimators: unknown estimator {e!r}")
            missing = [d for d in ROSTER[e].needs if d not in designs]
            if missing:
                raise ConfigError(f"estimators: {e!r} needs design(s) {missing} in 'designs'")
        replicates = _int(raw.get("replicates", SCALES["desk"]["replicates"]), "replicates")
        if replicates < 1:
            raise ConfigError("replicates must be at least 1")
        pop = dict(raw.get("population", {"synthesize": {}}))
        if len(pop) != 1 or next(iter(pop)) not in ("synthesize", "load"):
            raise ConfigError("population must be {'synthesize': {...}} or {'load': path}")
        try:
            constraints = (parse_constraints(raw["constraints"]) if "constraints" in raw
                           else default_constraints())
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"constraints: {exc}") from None
        cpi = sel.get("constant_pi")
        if cpi is not None and not 0 <= float(cpi) <= 1:
            raise ConfigError("selection_model.constant_pi must lie in [0, 1]")
        mi_weights = raw.get("mi_weights", "design")
        if mi_weights not in ("design", "calibrated"):
            raise ConfigError("mi_weights must be 'design' or 'calibrated'")
        kw_cal_benchmarks = raw.get("kw_cal_benchmarks", "frame")
        if kw_cal_benchmarks not in ("frame", "estimated"):
            raise ConfigError("kw_cal_benchmarks must be 'frame' or 'estimated'")
        return cls(
            scenarios=scenarios, designs=designs, estimators=estimators, replicates=replicates,
            seed=_int(raw.get("seed", 1), "seed"), population=pop,
            downweights=sel.get("downweights"),
            constant_pi=None if cpi is None else float(cpi),
            constraints=constraints,
            min_stratum_n=_int(raw.get("min_stratum_n", 6), "min_stratum_n"),
            mi_weights=mi_weights, kw_cal_benchmarks=kw_cal_benchmarks,
            base_dir=Path(base_dir),
        )

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)

    def selection_model(self, scenario: Scenario) -> SelectionModel:
        try:
            return SelectionModel(*scenario.phi, industry_downweights=(
                SelectionModel.sar().industry_downweights if self.downweights is None
                else dict(self.downweights)))
        except ValueError as exc:
            raise ConfigError(f"selection_model.downweights: {exc}") from None


def _int(v, name) -> int:
    if isinstance(v, bool) or not float(v).is_integer():
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    return int(v)


def _scenario(raw: Mapping, sel: Mapping) -> Scenario:
    bad = set(raw) - {"name", "missingness", "measurement_error", "phi"}
    if bad:
        raise ConfigError(f"unknown scenario keys: {sorted(bad)}")
    miss = str(raw.get("missingness", "SAR")).upper()
    if miss not in ("SAR", "SNAR"):
        raise ConfigError(f"scenario.missingness must be SAR or SNAR, got {miss!r}")
    me = bool(raw.get("measurement_error", sel.get("use_starred", False)))
    if "use_starred" in sel and bool(sel["use_starred"]) != me:
        raise ConfigError("selection_model.use_starred contradicts scenario.measurement_error")
    phi = tuple(float(p) for p in raw.get("phi", sel.get("phi", SNAR_PHI if miss == "SNAR" else SAR_PHI)))
    if len(phi) != 3:
        raise ConfigError("phi must have three entries")
    if miss == "SNAR" and phi[2] == 0:
        raise ConfigError("SNAR scenario needs a nonzero earnings coefficient phi[2]")
    if miss == "SAR" and phi[2] != 0:
        raise ConfigError("SAR scenario needs phi[2] = 0")
    name = raw.get("name", f"{miss.lower()}_{'me' if me else 'no_me'}")
    return Scenario(str(name), miss, me, phi)


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parsed
    return out


def apply_scale(raw: dict, scale: str) -> dict:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}")
    out = json.loads(json.dumps(raw))
    out["replicates"] = SCALES[scale]["replicates"]
    pop = out.setdefault("population", {"synthesize": {}})
    if "synthesize" in pop:
        pop["synthesize"] = dict(pop["synthesize"] or {}, n=SCALES[scale]["n"])
    return out


def build_population(config: ScenarioConfig) -> PopulationFrame:
    kind, spec = next(iter(config.population.items()))
    if kind == "load":
        return load_population(config.base_dir / str(spec))
    spec = dict(spec or {})
    bad = set(spec) - {"n", "seed", "config"}
    if bad:
        raise ConfigError(f"unknown population.synthesize keys: {sorted(bad)}")
    if "config" in spec:
        pc = PopulationConfig.from_json(config.base_dir / spec["config"])
        if "n" in spec:
            pc = dataclasses.replace(pc, n=_int(spec["n"], "population.synthesize.n"))
    else:
        pc = default_config(n=_int(spec.get("n", SCALES["desk"]["n"]), "population.synthesize.n"))
    seed = spec.get("seed")
    return synthesize_population(pc, None if seed is None else _int(seed, "population.synthesize.seed"))


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------


def replicate_rng(master_seed: int, replicate: int, stream: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(replicate, STREAMS[stream]))
    return np.random.default_rng(ss)


class SimulationContext:
    """Everything replicates of one scenario share: frame, probabilities, fixed allocations."""

    def __init__(self, frame: PopulationFrame, config: ScenarioConfig, scenario: Scenario,
                 cache: FrameCache | None = None, fixed: dict | None = None):
        self.frame = frame
        self.config = config
        self.scenario = scenario
        self.cache = cache or FrameCache(frame)
        if config.constant_pi is not None:
            self.pi = np.full(frame.N, config.constant_pi)
        else:
            self.pi = selection_probabilities(frame, config.selection_model(scenario))
        self.designs = list(config.designs)
        self.fixed = fixed if fixed is not None else fixed_allocations(frame, config)

    def allocation(self, design: str, mask: np.ndarray):
        if design in self.fixed:
            return self.fixed[design]
        strata = stratify(self.frame, mask)
        return strata, bethel_chromy_allocate(strata, self.config.constraints, self.config.min_stratum_n)


def fixed_allocations(frame: PopulationFrame, config: ScenarioConfig) -> dict:
    """Allocations that do not depend on B (single-frame and cut-off)."""
    out = {}
    for d in config.designs:
        if d == "dual_screening":
            continue
        mask, _ = build_design_frame(frame, None, d)
        strata = stratify(frame, mask)
        out[d] = (strata, bethel_chromy_allocate(strata, config.constraints, config.min_stratum_n))
    return out


@dataclasses.dataclass
class ReplicateOutput:
    index: int
    values: np.ndarray  # (n_estimators, 4), NaN where an estimator failed
    errors: dict  # estimator -> message
    sizes: dict  # design -> n_A
    diagnostics: dict  # estimator -> {key: count}


def run_replicate(ctx: SimulationContext, index: int) -> ReplicateOutput:
    cfg = ctx.config
    frame = ctx.frame
    big = draw_big_dataset(frame, ctx.pi, ctx.scenario.measurement_error,
                           replicate_rng(cfg.seed, index, "big_data"))
    samples, excluded, sizes, design_errors = {}, {}, {}, {}
    for d in ctx.designs:
        try:
            mask, excl = build_design_frame(frame, big, d)
            strata, alloc = ctx.allocation(d, mask)
            samples[d] = draw_stratified_sample(strata, alloc, replicate_rng(cfg.seed, index, d))
            excluded[d] = excl
            sizes[d] = samples[d].n
        except Exception as exc:  # recorded against the estimators that need it
            design_errors[d] = f"{d} design failed: {exc}"
    data = ReplicateData(ctx.cache, big, samples, excluded,
                         replicate_rng(cfg.seed, index, "hot_deck"), cfg.mi_weights,
                         cfg.kw_cal_benchmarks)
    values = np.full((len(cfg.estimators), len(OUTPUT_VARIABLES)), np.nan)
    errors, diagnostics = {}, {}
    for k, est in enumerate(cfg.estimators):
        blocked = [design_errors[d] for d in ROSTER[est].needs if d in design_errors]
        if blocked:
            errors[est] = blocked[0]
            continue
        try:
            out = evaluate(est, data)
            values[k, :3] = out.totals
            diagnostics[est] = out.diagnostics
            if out.totals[1] > 0:
                values[k, 3] = out.totals[0] / out.totals[1]
        except Exception as exc:
            errors[est] = f"{type(exc).__name__}: {exc}"
    return ReplicateOutput(index, values, errors, sizes, diagnostics)


_WORKER: dict = {}


def _init_worker(frame, config, scenario, fixed):
    _WORKER["ctx"] = SimulationContext(frame, config, scenario, fixed=fixed)


def _run_chunk(indices):
    ctx = _WORKER["ctx"]
    return [run_replicate(ctx, i) for i in indices]


def run_scenario(frame: PopulationFrame, config: ScenarioConfig, scenario: Scenario,
                 threads: int | None = None, cache: FrameCache | None = None,
                 fixed: dict | None = None) -> "ScenarioResult":
    ctx = SimulationContext(frame, config, scenario, cache=cache, fixed=fixed)
    idx = list(range(config.replicates))
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(idx) == 1:
        outputs = [run_replicate(ctx, i) for i in idx]
    else:
        chunks = [idx[i::threads * 4] for i in range(min(len(idx), threads * 4))]
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(frame, config, scenario, ctx.fixed)) as pool:
            outputs = [o for chunk in pool.map(_run_chunk, chunks) for o in chunk]
        outputs.sort(key=lambda o: o.index)
    return aggregate(outputs, ctx.cache.truth, config.estimators, scenario.name, config.designs)


def run_simulation(frame: PopulationFrame, config: ScenarioConfig,
                   threads: int | None = None) -> list["ScenarioResult"]:
    cache = FrameCache(frame)
    fixed = fixed_allocations(frame, config)
    return [run_scenario(frame, config, s, threads, cache, fixed) for s in config.scenarios]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ResultRow:
    design: str
    estimator: str
    variable: str
    rb: float
    rrmse: float
    n_replicates: int
    n_failures: int


@dataclasses.dataclass
class ScenarioResult:
    scenario: str
    rows: list[ResultRow]
    sizes: dict  # design -> mean n_A
    diagnostics: dict = dataclasses.field(default_factory=dict)
    errors: dict = dataclasses.field(default_factory=dict)  # estimator -> first message

    def get(self, estimator: str, variable: str) -> ResultRow:
        for r in self.rows:
            if r.estimator == estimator and r.variable == variable:
                return r
        raise KeyError((estimator, variable))


def rb_rrmse(estimates, truth: float) -> tuple[float, float]:
    est = np.asarray(estimates, dtype=float)
    if truth == 0:
        raise ValueError("true total is zero; relative measures undefined")
    if est.size == 0:
        return math.nan, math.nan
    err = est - truth
    return float(np.mean(err / truth)), float(math.sqrt(np.mean(err ** 2)) / abs(truth))


def aggregate(outputs: Sequence[ReplicateOutput], truth, estimators: Sequence[str],
              scenario: str = "scenario", designs: Sequence[str] = ()) -> ScenarioResult:
    outputs = sorted(outputs, key=lambda o: o.index)
    R = len(outputs)
    rows, diag, errors = [], {}, {}
    stack = (np.stack([o.values for o in outputs]) if outputs
             else np.empty((0, len(estimators), len(OUTPUT_VARIABLES))))
    for k, est in enumerate(estimators):
        for v, var in enumerate(OUTPUT_VARIABLES):
            col = stack[:, k, v]
            ok = col[~np.isnan(col)]
            rb, rrmse = rb_rrmse(ok, float(truth[v]))
            rows.append(ResultRow(ROSTER[est].group if est in ROSTER else "", est, var,
                                  rb, rrmse, int(ok.size), R - int(ok.size)))
        totals: dict = {}
        for o in outputs:
            for key, val in o.diagnostics.get(est, {}).items():
                totals[key] = totals.get(key, 0) + val
            if est in o.errors and est not in errors:
                errors[est] = o.errors[est]
        if totals:
            diag[est] = totals
    sizes = {}
    for d in designs:
        n = [o.sizes[d] for o in outputs if d in o.sizes]
        if n:
            sizes[d] = float(np.mean(n))
    return ScenarioResult(scenario, rows, sizes, diag, errors)


# ---------------------------------------------------------------------------
# Results files and reports
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_results(results: Sequence[ScenarioResult], path) -> None:
    """Results CSV plus a ``.sizes.csv`` sidecar with mean reference-sample sizes."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for res in results:
            for r in res.rows:
                w.writerow([res.scenario, r.design, r.estimator, r.variable, _fmt(r.rb),
                            _fmt(r.rrmse), r.n_replicates, r.n_failures])
    with open(sizes_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "design", "mean_n"])
        for res in results:
            for d, n in res.sizes.items():
                w.writerow([res.scenario, d, _fmt(n)])


def sizes_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".sizes.csv")


def read_results(path) -> list[ScenarioResult]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ConfigError(f"{path}: expected header {','.join(RESULT_COLUMNS)}")
        by: dict[str, ScenarioResult] = {}
        for row in reader:
            res = by.setdefault(row["scenario"], ScenarioResult(row["scenario"], [], {}))
            res.rows.append(ResultRow(row["design"], row["estimator"], row["variable"],
                                      float(row["rb"]), float(row["rrmse"]),
                                      int(row["n_replicates"]), int(row["n_failures"])))
    sp = sizes_path(path)
    if sp.exists():
        with open(sp, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["scenario"] in by:
                    by[row["scenario"]].sizes[row["design"]] = float(row["mean_n"])
    return list(by.values())


GROUP_LABELS = {"single": "Single-frame design", "dual_screening": "Dual-frame design",
                "cutoff": "Cut-off design", "big_data": "Big data only"}
DESIGN_LABELS = {"single": "Single-frame", "dual_screening": "Dual-frame", "cutoff": "Cut-off"}


def fmt_pct(x: float) -> str:
    """x * 100 to one decimal; negative zero prints as 0.0."""
    if math.isnan(x):
        return "NA"
    s = f"{x * 100:.1f}"
    return "0.0" if s == "-0.0" else s


def _scenario_table(res: ScenarioResult):
    header = (["Design", "Estimator"] + [f"RB {v.capitalize() if v != 'awe' else 'AWE'}" for v in OUTPUT_VARIABLES]
              + [f"RRMSE {v.capitalize() if v != 'awe' else 'AWE'}" for v in OUTPUT_VARIABLES]
              + ["Failures"])
    cells: dict = {}
    order: list = []
    for r in res.rows:
        key = (r.design, r.estimator)
        if key not in cells:
            cells[key] = {}
            order.append(key)
        cells[key][r.variable] = r
    rank = {g: i for i, g in enumerate(GROUP_ORDER)}
    order.sort(key=lambda k: rank.get(k[0], len(rank)))
    body = []
    for design, est in order:
        c = cells[(design, est)]
        rbs = [fmt_pct(c[v].rb) if v in c else "NA" for v in OUTPUT_VARIABLES]
        rrs = [fmt_pct(c[v].rrmse) if v in c else "NA" for v in OUTPUT_VARIABLES]
        fails = max((c[v].n_failures for v in c), default=0)
        body.append([GROUP_LABELS.get(design, design), est] + rbs + rrs + [str(fails)])
    return header, body


def _size_table(res: ScenarioResult):
    header = ["Design", "Mean sample size", "Reduction"]
    body = []
    base = res.sizes.get("single")
    for d, n in res.sizes.items():
        red = "" if not base else f"{round(100 * (1 - n / base))}%"
        body.append([DESIGN_LABELS.get(d, d), f"{n:,.1f}", red])
    return header, body


def _markdown(header, body) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    return "\n".join(lines) + "\n"


def _csv(header, body) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()


def report(results: Sequence[ScenarioResult], fmt: str = "markdown") -> str:
    """RB and RRMSE (x10^2, one decimal) per scenario, plus sample sizes."""
    if fmt not in ("markdown", "csv"):
        raise ConfigError(f"unknown report format {fmt!r}")
    render = _markdown if fmt == "markdown" else _csv
    parts = []
    for res in results:
        title = f"Scenario {res.scenario}: RB and RRMSE (x10^2)"
        parts.append((f"## {title}\n\n" if fmt == "markdown" else f"# {title}\n")
                     + render(*_scenario_table(res)))
        if res.sizes:
            t = f"Scenario {res.scenario}: reference sample sizes"
            parts.append((f"## {t}\n\n" if fmt == "markdown" else f"# {t}\n")
                         + render(*_size_table(res)))
    if not parts:
        header, _ = _scenario_table(ScenarioResult("", [], {}))
        return render(header, [])
    return "\n".join(parts)
