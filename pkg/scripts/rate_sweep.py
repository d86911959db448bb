"""Critical sampling rate of the robust filter on the slow segway.

Sweeps the slow LQR + filter scenario over a list of control rates and prints
one line per rate plus the lowest safe rate. The unfiltered LQR run is printed
first for comparison.

    python scripts/rate_sweep.py --rates 250,500,1000,1500,2000 --out runs/sweep
"""

import argparse
from pathlib import Path

from dtcbf.simcli import load_scenario, run_scenario, sweep_rates

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", default="250,500,1000,1250,1500,2000,3000")
    ap.add_argument("--out", default=None)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    print(run_scenario(load_scenario(SCENARIOS / "slow_lqr.ini"), args.out).line())
    sc = load_scenario(SCENARIOS / "slow_lqr_dbc.ini")
    sc.run.stop_early = True  # an infeasible filter ends the run, no need to simulate the rest
    summary = sweep_rates(sc, [float(r) for r in args.rates.split(",")], args.out, args.workers)
    for line in summary.lines():
        print(line)


if __name__ == "__main__":
    main()
