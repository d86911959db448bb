"""Closed-loop comparison of the NMPC stacks on the 0.4 m and 0.7 m steps.

Runs the shipped step scenarios and prints verdict, min_h, pitch peak and
solve-time statistics for each. With ``--out`` the traces and reports are kept.

    python scripts/step_comparison.py --out runs/steps
"""

import argparse
from pathlib import Path

from dtcbf.simcli import load_scenario, run_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
RUNS = ("step04_full_nmpc", "step04_rti", "step07_rti", "step07_rti_cbf", "step07_rti_tube")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None)
    ap.add_argument("--only", default=",".join(RUNS), help="comma-separated scenario names")
    ap.add_argument("--wall", action="store_true", help="record measured solve times")
    args = ap.parse_args()

    for name in args.only.split(","):
        sc = load_scenario(SCENARIOS / f"{name}.ini")
        if args.wall:
            sc.run.timing = "wall"
        rep = run_scenario(sc, args.out)
        st = rep.solve_time_stats()
        print(rep.line() + f" saturated={rep.result.saturated} mean_solve={st['mean_us']:.0f}us "
              f"wall={rep.wall_time_s:.1f}s")
        for note in rep.notes:
            print("  note:", note)


if __name__ == "__main__":
    main()
