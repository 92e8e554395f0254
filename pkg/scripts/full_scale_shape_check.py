"""Full-scale SAR / no-measurement-error run compared with published values.

Checks two shape properties against the published RB and RRMSE table:
every RB entry with |RB| >= 1e-2 has the published sign, and the earnings
RRMSE order GREG < RDI < QR MA holds. Prints one PASS/FAIL line per check
and exits 1 if any fails.

Usage:
    python3 scripts/full_scale_shape_check.py [--population PATH] [--replicates R]
        [--threads N] [--out results/full_sar_no_me.csv]

The default is the synthesized 900,000-unit population with 2,000 replicates
(hours of CPU). ``--population`` ingests a population CSV instead.
"""

import argparse
import sys
from pathlib import Path

from nonprob.estimators import ROSTER
from nonprob.simulation import (SCALES, ScenarioConfig, build_population, report, run_simulation,
                                write_results)

ROOT = Path(__file__).resolve().parents[1]

# published RB (x10^2) for SAR without measurement error: earn, emp, ovt, awe
PUBLISHED_RB = {
    "rdi": (0.0, 0.0, 0.2, 0.0),
    "greg": (0.0, 0.0, 0.2, 0.0),
    "qr_ma": (0.0, 0.0, 0.2, 0.0),
    "kw": (0.1, -0.2, 0.3, 0.2),
    "kw_cal": (0.2, 0.0, 0.4, 0.2),
    "kw_earn": (-0.1, -0.3, 0.1, 0.2),
    "alp": (-0.2, 0.0, 0.6, -0.1),
    "wgt_reg_mi": (0.2, 0.0, 0.6, 0.3),
    "dr_wgt": (0.2, 0.0, 0.6, 0.3),
    "hd_mi": (0.2, 0.2, 0.5, 0.0),
    "sp": (0.0, 0.0, 0.0, 0.0),
    "sp_cal": (0.0, 0.0, 0.0, 0.0),
    "co_bd": (-6.2, -6.3, -6.5, 0.0),
    "co_cal_kwfr": (0.1, 0.0, 0.1, 0.2),
    "auxdiv": (-2.9, -2.8, -3.3, -0.1),
    "kwfr": (0.4, 0.1, 0.6, 0.3),
}
PUBLISHED_EARN_RRMSE = {"greg": 0.8, "rdi": 1.0, "qr_ma": 1.3}
VARIABLES = ("earn", "emp", "ovt", "awe")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--population", type=Path, help="population CSV to ingest")
    p.add_argument("--replicates", type=int, default=SCALES["full"]["replicates"])
    p.add_argument("--n", type=int, default=SCALES["full"]["n"], help="synthesized size")
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, default=ROOT / "results" / "full_sar_no_me.csv")
    args = p.parse_args(argv)

    population = ({"load": str(args.population.resolve())} if args.population
                  else {"synthesize": {"n": args.n, "seed": 2024}})
    config = ScenarioConfig.from_dict({
        "scenario": {"missingness": "SAR", "measurement_error": False},
        "estimators": [e for e in ROSTER if e in PUBLISHED_RB or e == "ht"],
        "replicates": args.replicates, "seed": args.seed, "population": population,
    })
    frame = build_population(config)
    res = run_simulation(frame, config, threads=args.threads)[0]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_results([res], args.out)
    print(report([res]))

    failures = 0
    for est, published in PUBLISHED_RB.items():
        for var, pub in zip(VARIABLES, published):
            if abs(pub) < 1.0:
                continue
            got = res.get(est, var).rb * 100
            ok = (got > 0) == (pub > 0)
            failures += not ok
            print(f"{'PASS' if ok else 'FAIL'} sign {est}/{var}: {got:+.2f} vs published {pub:+.1f}")
    got = {e: res.get(e, "earn").rrmse * 100 for e in PUBLISHED_EARN_RRMSE}
    ok = got["greg"] < got["rdi"] < got["qr_ma"]
    failures += not ok
    print(f"{'PASS' if ok else 'FAIL'} earn RRMSE order greg {got['greg']:.2f} < rdi "
          f"{got['rdi']:.2f} < qr_ma {got['qr_ma']:.2f} (published 0.8 < 1.0 < 1.3)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
