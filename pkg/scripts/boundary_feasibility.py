"""Feasibility of the robust filter near the safe-set boundary on the fast segway.

Samples states on the level set h = 1 - level of the fast barrier (position
zero) and counts how many leave the robust filter infeasible at each rate.

    python scripts/boundary_feasibility.py --rates 33,100,1000,10000
"""

import argparse

import numpy as np

from dtcbf import segway as sg
from dtcbf.bounds import system_budgets
from dtcbf.dbc_filter import safety_filter


def boundary_states(cbf, count, rng, level):
    P3 = cbf.P[1:, 1:]
    out = []
    for _ in range(count):
        z = rng.normal(size=3)
        z *= np.sqrt(level / (z @ P3 @ z))
        out.append(np.concatenate([[0.0], z]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", default="33,100,300,1000,3000,10000")
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--level", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    p = sg.FAST
    sys, cbf, U = sg.make_system(p), sg.default_cbf(p), sg.input_set(p)
    budgets = system_budgets(sys, cbf, sg.cbf_box(cbf, margin=1.1), U, 7)
    states = boundary_states(cbf, args.samples, np.random.default_rng(args.seed), args.level)
    for rate in (float(r) for r in args.rates.split(",")):
        W = budgets.disturbance_set(1.0 / rate)
        bad = sum(not safety_filter(sys, cbf, W, x, np.zeros(1), U).feasible for x in states)
        print(f"{rate:8g} Hz  infeasible {bad}/{len(states)}")


if __name__ == "__main__":
    main()
