"""Command-line entry point: ``nonprob {synth-pop,allocate,simulate,report}``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numerical error.
Diagnostics go to standard error; data goes to files or standard output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bigdata import draw_big_dataset, selection_probabilities
from .design import DESIGNS, bethel_chromy_allocate, build_design_frame, stratify
from .population import (STATES, INDUSTRIES, SIZE_BANDS, PopulationError, default_config_dict,
                         PopulationConfig, save_population, synthesize_population)
from .simulation import (SCALES, ConfigError, ScenarioConfig, apply_overrides, apply_scale,
                         build_population, fixed_allocations, read_results, replicate_rng,
                         report, run_simulation, write_results, _csv, _markdown)

PROG = "nonprob"


EPILOG = """\
subcommands and flags:
  synth-pop  --out PATH [--config PATH] [--seed N] [--scale {desk,full}] [--set KEY=VALUE]
  allocate   --config PATH [--out PATH] [--seed N] [--scale {desk,full}]
             [--format {csv,markdown}] [--set KEY=VALUE]
  simulate   --config PATH --out PATH [--seed N] [--threads N] [--scale {desk,full}]
             [--set KEY=VALUE]
  report     --results PATH [--out PATH] [--format {csv,markdown}]

exit codes: 0 success, 1 configuration error, 2 runtime or numerical error
"""


def _formatter(prog):
    # fixed width so help text does not depend on the terminal
    return argparse.RawDescriptionHelpFormatter(prog, width=88)


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class", _formatter)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Simulation study of estimators that combine a "
                "probability sample with a non-probability dataset.", epilog=EPILOG)
    sub = p.add_subparsers(dest="command", metavar="{synth-pop,allocate,simulate,report}",
                           parser_class=_Parser)
    sub.required = True

    def common(sp, config_required: bool, config_help: str):
        sp.add_argument("--config", required=config_required, type=Path, help=config_help)
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a config entry after the file is parsed (repeatable; "
                             "dotted keys, JSON values)")

    sp = sub.add_parser("synth-pop", help="synthesize a population frame and write it as CSV")
    common(sp, False, "population config JSON (default: bundled config)")
    sp.add_argument("--out", required=True, type=Path, help="output population CSV")
    sp.add_argument("--seed", type=int, help="population seed (overrides the config)")
    sp.add_argument("--scale", choices=sorted(SCALES), help="set the population size")

    sp = sub.add_parser("allocate", help="compute Bethel-Chromy allocations for each design")
    common(sp, True, "scenario config JSON")
    sp.add_argument("--out", type=Path, help="per-stratum allocation CSV")
    sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
    sp.add_argument("--scale", choices=sorted(SCALES), help="desk or full scale population")
    sp.add_argument("--format", choices=("csv", "markdown"), default="markdown",
                    help="summary format on standard output")

    sp = sub.add_parser("simulate", help="run the Monte Carlo replicates and write results")
    common(sp, True, "scenario config JSON")
    sp.add_argument("--out", required=True, type=Path, help="results CSV")
    sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
    sp.add_argument("--threads", type=int, help="worker processes (default: available CPUs)")
    sp.add_argument("--scale", choices=sorted(SCALES), help="desk or full scale run")

    sp = sub.add_parser("report", help="render RB/RRMSE tables from a results CSV")
    sp.add_argument("--results", required=True, type=Path, help="results CSV from simulate")
    sp.add_argument("--out", type=Path, help="write the report here instead of standard output")
    sp.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    return p


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def _scenario_config(args) -> ScenarioConfig:
    raw = apply_overrides(_read_json(args.config), args.overrides)
    if args.scale:
        raw = apply_scale(raw, args.scale)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return ScenarioConfig.from_dict(raw, base_dir=args.config.parent)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{args.config}: {type(exc).__name__}: {exc}") from None


def cmd_synth_pop(args) -> int:
    raw = _read_json(args.config) if args.config else default_config_dict()
    raw = apply_overrides(raw, args.overrides)
    if args.scale:
        raw["n"] = SCALES[args.scale]["n"]
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        pc = PopulationConfig.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PopulationError):
            raise
        raise ConfigError(f"population config: {type(exc).__name__}: {exc}") from None
    frame = synthesize_population(pc)
    save_population(frame, args.out)
    print(f"wrote {frame.N} units to {args.out}", file=sys.stderr)
    return 0


def cmd_allocate(args) -> int:
    config = _scenario_config(args)
    frame = build_population(config)
    allocs = fixed_allocations(frame, config)
    if "dual_screening" in config.designs:
        # the screening frame depends on B; use replicate 0 of the first scenario
        scenario = config.scenarios[0]
        pi = selection_probabilities(frame, config.selection_model(scenario))
        big = draw_big_dataset(frame, pi, scenario.measurement_error,
                               replicate_rng(config.seed, 0, "big_data"))
        mask, _ = build_design_frame(frame, big, "dual_screening")
        strata = stratify(frame, mask)
        allocs["dual_screening"] = (strata, bethel_chromy_allocate(
            strata, config.constraints, config.min_stratum_n))
    order = [d for d in DESIGNS if d in allocs]
    base = allocs["single"][1].total_n if "single" in allocs else None
    body = []
    for d in order:
        strata, alloc = allocs[d]
        saving = "" if base is None else f"{100 * (1 - alloc.total_n / base):.1f}"
        body.append([d, str(int(strata.N_h.sum())), str(strata.H), str(alloc.total_n), saving])
    header = ["design", "frame_N", "strata", "total_n", "saving_pct"]
    text = _markdown(header, body) if args.format == "markdown" else _csv(header, body)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("design,state,industry,band,N_h,n_h\n")
            for d in order:
                strata, alloc = allocs[d]
                for h in range(strata.H):
                    fh.write(f"{d},{STATES[strata.state[h]]},{INDUSTRIES[strata.industry[h]]},"
                             f"{SIZE_BANDS[strata.band[h]]},{int(strata.N_h[h])},"
                             f"{int(alloc.n_h[h])}\n")
    return 0


def cmd_simulate(args) -> int:
    config = _scenario_config(args)
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    frame = build_population(config)
    threads = args.threads or os.cpu_count() or 1
    print(f"N={frame.N}, replicates={config.replicates}, threads={threads}", file=sys.stderr)
    results = run_simulation(frame, config, threads=threads)
    write_results(results, args.out)
    for res in results:
        for est, msg in res.errors.items():
            print(f"[{res.scenario}] {est}: {msg}", file=sys.stderr)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    if not args.results.exists():
        raise ConfigError(f"results file not found: {args.results}")
    text = report(read_results(args.results), fmt=args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {"synth-pop": cmd_synth_pop, "allocate": cmd_allocate, "simulate": cmd_simulate,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ConfigError, PopulationError) as exc:
        print(f"{PROG}: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
