"""Sweep one tetrahedron agent over a planar box and write the outcome CSV and heatmap."""

import argparse
import time
from pathlib import Path

import numpy as np

from dampedvi import SweepPlan, converged_fraction, emit_heatmap, regular_tetrahedron, run_campaign, write_outcomes_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=3000)
    ap.add_argument("--half-width", type=float, default=3.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("out"))
    args = ap.parse_args()

    shape, base = regular_tetrahedron(2.0)
    target = base[9:12]
    box = np.array([args.half_width, args.half_width, 0.0])
    plan = SweepPlan(shape, base, 3, tuple(target - box), tuple(target + box), count=args.count, seed=args.seed)
    t0 = time.perf_counter()
    out = run_campaign(plan, threads=args.threads)
    wall = time.perf_counter() - t0

    args.out.mkdir(parents=True, exist_ok=True)
    write_outcomes_csv(out, args.out / "sweep.csv", 3)
    emit_heatmap(out, plan, args.out / "sweep_heatmap.svg")

    pts = np.array([o.initial_position for o in out])
    conv = np.array([o.converged for o in out])
    r = np.linalg.norm(pts - target, axis=1)
    ball = r[~conv].min() if (~conv).any() else np.inf
    h, steps = plan.resolved_step()
    print(f"h={h:.6g}, {steps} steps, {len(out)} samples in {wall:.2f} s")
    print(f"converged fraction {converged_fraction(out):.3f}; clean ball radius {ball:.3f} ({(r < ball).sum()} samples)")
    for lo, hi in ((0, 1), (1, 2), (2, 3), (3, 5)):
        ring = (r >= lo) & (r < hi)
        if ring.any():
            print(f"  {lo} <= r < {hi}: {conv[ring].mean():.2f} converged of {ring.sum()}")


if __name__ == "__main__":
    main()
