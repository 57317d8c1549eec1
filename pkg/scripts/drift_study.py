"""Extended-energy drift of the damped oscillator as a function of step size."""

import argparse

import numpy as np

from dampedvi import IntegratorConfig, extended_energy_drift, harmonic_oscillator


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--damping", type=float, default=1.0)
    ap.add_argument("--time", type=float, default=1000.0)
    ap.add_argument("--steps", type=float, nargs="+", default=[0.02, 0.01, 0.005])
    args = ap.parse_args()

    model = harmonic_oscillator(1, args.damping, 1.0)
    prev = None
    for h in args.steps:
        n = int(round(args.time / h))
        d = np.abs(extended_energy_drift(model, IntegratorConfig(h, n, [1.0], [0.0], "legendre"))).astype(float)
        slope = np.polyfit(np.arange(d.size, dtype=float), d, 1)[0]
        ratio = "" if prev is None else f"  ratio {prev / d.max():.3f}"
        print(f"h={h:<7g} N={n:<8d} max drift {d.max():.3e}  slope {slope:.1e}/step{ratio}")
        prev = d.max()


if __name__ == "__main__":
    main()
