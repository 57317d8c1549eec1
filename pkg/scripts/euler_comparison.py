"""Compare the variational scheme with forward Euler on the square formation over a range of steps."""

import argparse

import numpy as np

from dampedvi import (
    SQUARE_DEMO_START,
    IntegratorConfig,
    congruence_check,
    euler_integrate,
    formation_model,
    integrate,
    planar_square_shape,
)
from dampedvi.formation import congruence_discrepancy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=float, nargs="+", default=[0.005, 0.008, 0.02, 0.05, 0.1, 0.5])
    ap.add_argument("--horizon", type=float, default=6.0)
    args = ap.parse_args()

    shape, target = planar_square_shape(5.0)
    model = formation_model(shape, 13.0)
    v0 = np.zeros(12)
    print(f"{'h':>7} {'method':>11} {'status':>9} {'max|q|':>9} {'discrepancy':>12} congruent")
    for h in args.steps:
        n = max(1, int(round(args.horizon / h)))
        cfg = IntegratorConfig(h, n, SQUARE_DEMO_START, v0)
        for name, tr, vel in (("variational", integrate(model, cfg), None), ("euler", euler_integrate(model, cfg), "v")):
            v = tr.velocity if vel is None else tr.v
            ok = tr.status == "ok"
            q = tr.q[-1]
            disc = float(congruence_discrepancy(target, q, 3)) if ok else float("nan")
            cong = ok and congruence_check(target, q, v[-1], 3)
            print(f"{h:7.3f} {name:>11} {tr.status:>9} {np.max(np.abs(tr.q)):9.3g} {disc:12.3e} {cong}")


if __name__ == "__main__":
    main()
