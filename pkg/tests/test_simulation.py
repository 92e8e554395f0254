import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonprob.simulation import (
    SCALES, ConfigError, ReplicateOutput, ResultRow, ScenarioConfig, ScenarioResult,
    SimulationContext, aggregate, apply_overrides, apply_scale, build_population, fmt_pct,
    read_results, replicate_rng, report, rb_rrmse, run_replicate, run_simulation, write_results,
)

GOLDEN = Path(__file__).parent / "golden"


def small_raw(**extra):
    raw = {"population": {"synthesize": {"n": 20_000, "seed": 123}}, "replicates": 3, "seed": 5}
    raw.update(extra)
    return raw


@pytest.fixture(scope="module")
def frame():
    return build_population(ScenarioConfig.from_dict(small_raw()))


# --- config ----------------------------------------------------------------


def test_defaults():
    cfg = ScenarioConfig.from_dict({})
    assert [s.name for s in cfg.scenarios] == ["sar_no_me"]
    assert cfg.replicates == SCALES["desk"]["replicates"]
    assert cfg.designs == ["single", "dual_screening", "cutoff"]
    assert "ht" not in cfg.estimators and len(cfg.estimators) == 20
    assert cfg.population == {"synthesize": {}}


def test_scenario_grid():
    cfg = ScenarioConfig.from_dict({"scenarios": [
        {"missingness": m, "measurement_error": me} for m in ("SAR", "SNAR") for me in (False, True)]})
    assert [s.name for s in cfg.scenarios] == ["sar_no_me", "sar_me", "snar_no_me", "snar_me"]
    assert cfg.scenarios[2].phi == (0.85, 0.009, -0.1)


@pytest.mark.parametrize("raw, match", [
    ({"replicates": 0}, "replicates"),
    ({"replicates": 2.5}, "replicates"),
    ({"estimators": []}, "roster"),
    ({"estimators": ["knn"]}, "knn"),
    ({"designs": ["quota"]}, "quota"),
    ({"designs": ["single"], "estimators": ["sp"]}, "dual_screening"),
    ({"colour": 1}, "colour"),
    ({"scenario": {"missingness": "SNAR", "phi": [0.1, 0.0, 0.0]}}, "phi"),
    ({"scenario": {"missingness": "SAR", "phi": [0.1, 0.0, 0.2]}}, "phi"),
    ({"scenario": {"missingness": "MNAR"}}, "MNAR"),
    ({"scenario": {"missingness": "SAR", "lag": 1}}, "lag"),
    ({"scenario": {}, "scenarios": []}, "either"),
    ({"scenarios": [{"name": "a"}, {"name": "a"}]}, "unique"),
    ({"selection_model": {"constant_pi": 1.5}}, "constant_pi"),
    ({"selection_model": {"kernel": "x"}}, "kernel"),
    ({"selection_model": {"use_starred": True}, "scenario": {"measurement_error": False}}, "contradicts"),
    ({"population": {"download": "x"}}, "population"),
    ({"constraints": [{"domain": "county", "rse": 0.1}]}, "constraints"),
    ({"mi_weights": "median"}, "mi_weights"),
    ({"kw_cal_benchmarks": "guess"}, "kw_cal_benchmarks"),
])
def test_config_errors(raw, match):
    with pytest.raises(ConfigError, match=match):
        ScenarioConfig.from_dict(raw)


def test_bad_downweights_surface_as_config_error():
    cfg = ScenarioConfig.from_dict({"selection_model": {"downweights": {"Z": 0.5}}})
    with pytest.raises(ConfigError, match="downweights"):
        cfg.selection_model(cfg.scenarios[0])


def test_from_json_resolves_relative_paths(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"population": {"load": "pop.csv"}}))
    cfg = ScenarioConfig.from_json(tmp_path / "s.json")
    assert cfg.base_dir == tmp_path


def test_overrides():
    raw = apply_overrides({"seed": 1, "scenario": {"missingness": "SAR"}},
                          ["seed=9", "scenario.missingness=SNAR", "selection_model.downweights={}",
                           "designs=[\"single\"]"])
    assert raw["seed"] == 9 and raw["scenario"]["missingness"] == "SNAR"
    assert raw["selection_model"]["downweights"] == {} and raw["designs"] == ["single"]
    with pytest.raises(ConfigError):
        apply_overrides({}, ["seed"])
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_scale():
    raw = apply_scale({"population": {"synthesize": {"seed": 4}}}, "full")
    assert raw["replicates"] == 2000 and raw["population"]["synthesize"] == {"seed": 4, "n": 900_000}
    assert apply_scale({"population": {"load": "p.csv"}}, "desk")["population"] == {"load": "p.csv"}
    with pytest.raises(ConfigError):
        apply_scale({}, "huge")


def test_population_synthesize_keys():
    with pytest.raises(ConfigError, match="size"):
        build_population(ScenarioConfig.from_dict({"population": {"synthesize": {"size": 3}}}))


# --- seeds and replicates -------------------------------------------------------


def test_replicate_rng_streams_distinct():
    draws = {(r, s): replicate_rng(7, r, s).random()
             for r in range(3) for s in ("big_data", "single", "cutoff")}
    assert len(set(draws.values())) == len(draws)
    assert replicate_rng(7, 1, "single").random() == draws[(1, "single")]
    with pytest.raises(KeyError):
        replicate_rng(7, 0, "weather")


def test_replicate_deterministic(frame):
    cfg = ScenarioConfig.from_dict(small_raw())
    ctx = SimulationContext(frame, cfg, cfg.scenarios[0])
    a, b = run_replicate(ctx, 2), run_replicate(ctx, 2)
    assert np.array_equal(a.values, b.values, equal_nan=True)
    assert a.sizes == b.sizes and a.errors == b.errors
    assert not np.array_equal(a.values, run_replicate(ctx, 3).values, equal_nan=True)


def test_take_all_greg_exact(frame):
    cfg = ScenarioConfig.from_dict(small_raw(estimators=["greg"], designs=["single"],
                                             min_stratum_n=10**9))
    ctx = SimulationContext(frame, cfg, cfg.scenarios[0])
    out = run_replicate(ctx, 0)
    assert out.sizes["single"] == frame.N
    np.testing.assert_allclose(out.values[0], ctx.cache.truth, rtol=1e-10)


def test_empty_big_dataset_recorded_as_failures(frame):
    cfg = ScenarioConfig.from_dict(small_raw(selection_model={"constant_pi": 0.0}))
    out = run_replicate(SimulationContext(frame, cfg, cfg.scenarios[0]), 0)
    big_only = {"kw", "kwfr", "auxdiv", "kw_cal", "alp", "hd_mi"}
    assert big_only <= set(out.errors)
    k = cfg.estimators.index("greg")
    assert "greg" not in out.errors and np.isfinite(out.values[k]).all()
    for e in big_only:
        assert np.isnan(out.values[cfg.estimators.index(e)]).all()


def test_dual_frame_smaller_than_single(frame):
    res = run_simulation(frame, ScenarioConfig.from_dict(small_raw(replicates=2)), threads=1)
    assert res[0].sizes["dual_screening"] < res[0].sizes["single"]


def test_parallel_matches_serial(frame):
    cfg = ScenarioConfig.from_dict(small_raw(replicates=4))
    serial = run_simulation(frame, cfg, threads=1)
    parallel = run_simulation(frame, cfg, threads=2)
    assert serial[0].rows == parallel[0].rows
    assert serial[0].sizes == parallel[0].sizes


# --- aggregation ------------------------------------------------------------------


@pytest.mark.parametrize("est, truth, rb, rrmse", [
    ([90, 110], 100, 0.0, 0.1),
    ([100, 100, 100], 100, 0.0, 0.0),
    ([105], 100, 0.05, 0.05),
])
def test_rb_rrmse_examples(est, truth, rb, rrmse):
    got = rb_rrmse(est, truth)
    assert got[0] == pytest.approx(rb, abs=1e-15) and got[1] == pytest.approx(rrmse, abs=1e-15)


def test_rb_rrmse_zero_truth():
    with pytest.raises(ValueError):
        rb_rrmse([1.0], 0.0)
    assert all(math.isnan(v) for v in rb_rrmse([], 1.0))


@settings(max_examples=100)
@given(est=st.lists(st.floats(1, 1e9), min_size=1, max_size=50), truth=st.floats(1, 1e9))
def test_rrmse_decomposition(est, truth):
    rb, rrmse = rb_rrmse(est, truth)
    assert rrmse >= abs(rb) * (1 - 1e-12)
    var = np.var(np.asarray(est) / truth)
    assert rrmse**2 - rb**2 == pytest.approx(var, abs=1e-12 * max(1.0, rrmse**2))


def _outputs():
    vals = [np.array([[101.0, 50.0, 10.0, 2.02]]), np.array([[99.0, 50.0, np.nan, 1.98]])]
    return [ReplicateOutput(i, v, {"kw": "boom"} if i else {}, {"single": 10 + i}, {"kw": {"n": 1}})
            for i, v in enumerate(vals)]


def test_aggregate_excludes_failures():
    res = aggregate(_outputs(), np.array([100.0, 50.0, 10.0, 2.0]), ["kw"], "s", ["single"])
    ovt = res.get("kw", "ovt")
    assert (ovt.n_replicates, ovt.n_failures) == (1, 1) and ovt.rb == 0
    earn = res.get("kw", "earn")
    assert (earn.n_replicates, earn.rb, earn.rrmse) == (2, 0.0, pytest.approx(0.01))
    assert res.sizes == {"single": 10.5} and res.diagnostics == {"kw": {"n": 2}}
    assert res.errors == {"kw": "boom"}
    assert earn.n_replicates + earn.n_failures == 2


# --- files and reports ----------------------------------------------------------------


def test_results_round_trip(tmp_path):
    res = aggregate(_outputs(), np.array([100.0, 50.0, 10.0, 2.0]), ["kw"], "s", ["single"])
    path = tmp_path / "r.csv"
    write_results([res], path)
    assert path.read_text().splitlines()[0] == \
        "scenario,design,estimator,variable,rb,rrmse,n_replicates,n_failures"
    back = read_results(path)
    assert back[0].rows == res.rows and back[0].sizes == res.sizes


def test_read_results_bad_header(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_results(path)


@pytest.mark.parametrize("x, s", [(0.00123, "0.1"), (-0.0004, "0.0"), (-0.0621, "-6.2"),
                                  (float("nan"), "NA")])
def test_fmt_pct(x, s):
    assert fmt_pct(x) == s


def test_empty_roster_renders_header_only():
    text = report([ScenarioResult("s", [], {})])
    lines = [l for l in text.splitlines() if l.startswith("|")]
    assert len(lines) == 2 and lines[0].startswith("| Design | Estimator | RB Earn")


def _golden_results():
    rows = []
    for est, design, base in (("greg", "single", 0.00123), ("sp_cal", "dual_screening", -0.0004),
                              ("co_bd", "cutoff", -0.0621), ("kwfr", "big_data", 0.0155)):
        for k, var in enumerate(("earn", "emp", "ovt", "awe")):
            rb = base * (k + 1) / 2
            rows.append(ResultRow(design, est, var, rb, abs(rb) + 0.004 * (k + 1), 200,
                                  3 if est == "kwfr" and var == "ovt" else 0))
    return [ScenarioResult("sar_no_me", rows, {"single": 8012.5, "dual_screening": 5105.0,
                                                "cutoff": 6511.25})]


@pytest.mark.parametrize("fmt, name", [("markdown", "report.md"), ("csv", "report.csv")])
def test_report_golden(fmt, name):
    assert report(_golden_results(), fmt) == (GOLDEN / name).read_text(encoding="utf-8")


def test_report_unknown_format():
    with pytest.raises(ConfigError):
        report([], "html")
