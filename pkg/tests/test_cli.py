import json
import re
from pathlib import Path

import pandas as pd
import pytest

from nonprob.cli import main
from nonprob.population import default_config_dict

GOLDEN = Path(__file__).parent / "golden"
SUBCOMMANDS = ("synth-pop", "allocate", "simulate", "report")


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({
        "population": {"synthesize": {"n": 8000, "seed": 2}},
        "replicates": 2, "seed": 3,
        "estimators": ["greg", "sp_cal", "co_bd", "kw", "auxdiv"],
    }))
    return path


@pytest.mark.parametrize("argv, name", [([], "help.txt")]
                         + [([c], f"help_{c}.txt") for c in SUBCOMMANDS])
def test_help_golden(capsys, argv, name):
    assert main(argv + ["--help"]) == 0
    assert capsys.readouterr().out == (GOLDEN / name).read_text(encoding="utf-8")


def test_help_lists_every_subcommand_and_flag(capsys):
    main(["--help"])
    text = capsys.readouterr().out
    for c in SUBCOMMANDS:
        assert c in text
    for flag in ("--config", "--out", "--seed", "--threads", "--scale", "--format", "--results",
                 "--set"):
        assert flag in text


def test_simulate_and_report(tmp_path, scenario, capsys):
    out = tmp_path / "r.csv"
    assert main(["simulate", "--config", str(scenario), "--out", str(out), "--threads", "1"]) == 0
    df = pd.read_csv(out)
    assert list(df.columns) == ["scenario", "design", "estimator", "variable", "rb", "rrmse",
                                "n_replicates", "n_failures"]
    assert len(df) == 5 * 4 and (df.n_replicates == 2).all()
    capsys.readouterr()
    assert main(["report", "--results", str(out)]) == 0
    text = capsys.readouterr().out
    assert "| Single-frame design | greg |" in text
    assert main(["report", "--results", str(out), "--format", "csv",
                 "--out", str(tmp_path / "r.txt")]) == 0
    assert (tmp_path / "r.txt").read_text().startswith("# Scenario sar_no_me")


def test_simulate_thread_count_does_not_change_output(tmp_path, scenario):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", str(scenario), "--out", str(a), "--threads", "1"]) == 0
    assert main(["simulate", "--config", str(scenario), "--out", str(b), "--threads", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_seed_flag_changes_results(tmp_path, scenario):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", "--config", str(scenario), "--out", str(a), "--threads", "1"])
    main(["simulate", "--config", str(scenario), "--out", str(b), "--threads", "1", "--seed", "4"])
    assert a.read_bytes() != b.read_bytes()


def test_synth_pop_deterministic(tmp_path):
    cfg = tmp_path / "p.json"
    raw = default_config_dict()
    raw["n"] = 3000
    cfg.write_text(json.dumps(raw))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth-pop", "--config", str(cfg), "--seed", "7", "--out", str(a)]) == 0
    assert main(["synth-pop", "--config", str(cfg), "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(pd.read_csv(a)) == 3000


def test_allocate(tmp_path, scenario, capsys):
    out = tmp_path / "alloc.csv"
    assert main(["allocate", "--config", str(scenario), "--out", str(out), "--format", "csv"]) == 0
    summary = pd.read_csv(pd.io.common.StringIO(capsys.readouterr().out))
    assert list(summary.design) == ["single", "dual_screening", "cutoff"]
    per = pd.read_csv(out)
    assert list(per.columns) == ["design", "state", "industry", "band", "N_h", "n_h"]
    totals = per.groupby("design", sort=False).n_h.sum()
    assert totals.to_dict() == dict(zip(summary.design, summary.total_n))
    assert (per.n_h <= per.N_h).all()
    single = per[per.design == "single"]
    assert single.N_h.sum() == 8000


def test_missing_config_is_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["simulate", "--config", str(missing), "--out", str(tmp_path / "r.csv")]) == 1
    err = capsys.readouterr().err
    assert str(missing) in err and "config error" in err


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    [],
    ["simulate", "--out", "x.csv"],
    ["synth-pop"],
    ["simulate", "--config", "{cfg}", "--out", "x.csv", "--threads", "0"],
    ["simulate", "--config", "{cfg}", "--out", "x.csv", "--set", "replicates=0"],
    ["simulate", "--config", "{cfg}", "--out", "x.csv", "--set", "estimators=[\"knn\"]"],
    ["synth-pop", "--out", "x.csv", "--set", "colour=1"],
])
def test_config_errors_exit_1(tmp_path, scenario, capsys, argv):
    argv = [a.replace("{cfg}", str(scenario)) for a in argv]
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_invalid_json_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["allocate", "--config", str(bad)]) == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_runtime_error_exit_2(tmp_path, capsys):
    results = tmp_path / "r.csv"
    results.write_text("scenario,design,estimator,variable,rb,rrmse,n_replicates,n_failures\n"
                       "s,single,greg,earn,zero,0.1,2,0\n")
    assert main(["report", "--results", str(results)]) == 2
    assert re.search(r"error: ValueError", capsys.readouterr().err)


def test_unwritable_output_exit_2(tmp_path, capsys):
    assert main(["synth-pop", "--set", "n=50", "--out", str(tmp_path / "no" / "dir" / "p.csv")]) == 2
    assert capsys.readouterr().err
