"""Command-line front end: ``dampedvi {simulate,compare-euler,sweep,verify} --config FILE``.

Exit codes: 0 success, 1 config error, 2 divergence, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .campaign import (
    SweepPlan,
    classify_outcome,
    converged_fraction,
    emit_heatmap,
    run_campaign,
    write_outcomes_csv,
)
from .config import ConfigError, ExperimentConfig, load_config
from .core import (
    NoetherGenerator,
    Trajectory,
    euler_integrate,
    integrate,
    noether_drift,
)
from .formation import congruence_discrepancy, distance_errors, max_agent_speed
from .verify import run_suite

log = logging.getLogger("dampedvi")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
OUT_ENV = "DAMPEDVI_OUT"
DEFAULT_ENERGY_THRESHOLD = 1e-3


def _f(x) -> str:
    return format(float(x), ".17g")


def _time_below(values: np.ndarray, threshold: float, h: float) -> Optional[float]:
    """Earliest ``t = k h`` from which ``values`` stays below ``threshold`` to the end."""
    below = np.asarray(values) < threshold
    if len(below) == 0 or not below[-1]:
        return None
    above = np.flatnonzero(~below)
    k = 0 if above.size == 0 else int(above[-1]) + 1
    return k * h


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors, keep 2 for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dampedvi", description="Damped variational integrator experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("simulate", "compare-euler", "sweep", "verify"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./out)")
        s.add_argument("--seed", type=int, help="override the sampling seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or cfg.section("output").get("dir") or os.environ.get(OUT_ENV) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prefix(cfg: ExperimentConfig) -> str:
    return cfg.section("output").get("prefix") or cfg.name


def _write_json(path: Path, payload: dict) -> None:
    # json emits repr floats, which round-trip doubles exactly
    path.write_text(json.dumps(payload, indent=2, allow_nan=True) + "\n")


# ---------------------------------------------------------------------------
# trajectory artifacts


def trajectory_header(dim: int, generators: Sequence[NoetherGenerator]) -> list[str]:
    names = [g.name for g in generators]
    return (
        ["k", "t"]
        + [f"q{i}" for i in range(dim)]
        + [f"v{i}" for i in range(dim)]
        + ["E_d", "E_autonomous"]
        + [f"J_{n}" for n in names]
        + [f"m_{n}" for n in names]
        + ["del_residual"]
    )


def write_trajectory_csv(path: Path, tr: Trajectory, generators: Sequence[NoetherGenerator]) -> None:
    m = len(tr)
    scaled = np.stack([np.einsum("ij,ij->i", tr.velocity, g(tr.q)) for g in generators], axis=1) if generators else np.empty((m, 0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(tr.dim, generators))
        for k in range(m):
            res = tr.del_residual[k] if k < len(tr.del_residual) else float("nan")
            w.writerow(
                [k, _f(k * tr.step)]
                + [_f(x) for x in tr.q[k]]
                + [_f(x) for x in tr.velocity[k]]
                + [_f(tr.energy[k]), _f(tr.autonomous_energy[k])]
                + [_f(x) for x in tr.charges[k]]
                + [_f(x) for x in scaled[k]]
                + [_f(res)]
            )


def write_euler_csv(path: Path, tr) -> None:
    dim = tr.q.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t"] + [f"q{i}" for i in range(dim)] + [f"v{i}" for i in range(dim)] + ["E"])
        for k in range(tr.q.shape[0]):
            w.writerow([k, _f(k * tr.step)] + [_f(x) for x in tr.q[k]] + [_f(x) for x in tr.v[k]] + [_f(tr.energy[k])])


def _shape_report(cfg: ExperimentConfig, q: np.ndarray, v: np.ndarray, h: float) -> dict:
    """Shape diagnostics for a formation run, for either integrator."""
    if not cfg.is_formation or len(q) == 0:
        return {}
    shape = cfg.shape()
    d = shape.ambient_dim
    lengths = np.asarray(shape.desired_lengths)
    edge_rel = np.abs(np.sqrt(np.maximum(distance_errors(shape, q) + lengths**2, 0.0)) - lengths) / lengths
    rep = {
        "final_max_edge_error_rel": float(np.max(edge_rel[-1])),
        "time_edges_within_1pct": _time_below(np.max(edge_rel, axis=1), 0.01, h),
        "final_max_speed": float(max_agent_speed(v[-1], d)),
    }
    ref = cfg.reference_configuration()
    if ref is not None:
        disc = congruence_discrepancy(ref, q, d)
        rep["final_discrepancy"] = float(disc[-1])
        cls = classify_outcome(shape, ref, _Pair(q, v))
        rep["converged"] = bool(cls["converged"])
        rep["time_to_congruence"] = None if cls["steps_to_converge"] is None else cls["steps_to_converge"] * h
    else:
        rep["converged"] = bool(rep["final_max_edge_error_rel"] < 0.01 and rep["final_max_speed"] < 0.1)
    return rep


class _Pair:
    def __init__(self, q, v):
        self.q, self.v = q, v


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: ExperimentConfig, out: Path, args) -> int:
    model = cfg.model()
    icfg = cfg.integrator()
    gens = cfg.generators()
    guard = cfg.section("integrator").get("overflow_guard", 1e12)
    t0 = time.perf_counter()
    tr = integrate(model, icfg, gens, overflow_guard=guard)
    wall = time.perf_counter() - t0
    prefix = _prefix(cfg)
    write_trajectory_csv(out / f"{prefix}_trajectory.csv", tr, gens)
    thr = cfg.section("compare").get("energy_threshold", DEFAULT_ENERGY_THRESHOLD)
    summary = {
        "mode": "simulate",
        "status": tr.status,
        "diverged_at": tr.diverged_at,
        "step": icfg.step,
        "steps": icfg.steps,
        "points": len(tr),
        "final_energy": float(tr.autonomous_energy[-1]) if len(tr) else None,
        "final_weighted_energy": float(tr.energy[-1]) if len(tr) else None,
        "energy_threshold": thr,
        "time_energy_below_threshold": _time_below(tr.autonomous_energy, thr, icfg.step),
        "max_del_residual": float(np.max(tr.del_residual)) if len(tr.del_residual) else 0.0,
        "charge_drift": dict(zip(tr.generator_names, map(float, noether_drift(tr, gens)))) if gens and len(tr) else {},
        "wall_time_s": wall,
    }
    summary.update(_shape_report(cfg, tr.q, tr.velocity, icfg.step))
    summary.setdefault("converged", None)
    _write_json(out / f"{prefix}_summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("status", "converged", "final_energy", "time_energy_below_threshold")}))
    return EXIT_DIVERGED if tr.diverged else EXIT_OK


def cmd_compare_euler(cfg: ExperimentConfig, out: Path, args) -> int:
    model = cfg.model()
    icfg = cfg.integrator()
    guard = cfg.section("integrator").get("overflow_guard", 1e12)
    thr = cfg.section("compare").get("energy_threshold", DEFAULT_ENERGY_THRESHOLD)
    h = icfg.step
    var = integrate(model, icfg, overflow_guard=guard)
    eul = euler_integrate(model, icfg, overflow_guard=guard)
    prefix = _prefix(cfg)
    write_trajectory_csv(out / f"{prefix}_variational.csv", var, [])
    write_euler_csv(out / f"{prefix}_euler.csv", eul)

    def report(status, diverged_at, q, v, energy):
        rep = {
            "status": status,
            "diverged_at": diverged_at,
            "bounded": status == "ok",
            "max_abs_q": float(np.max(np.abs(q))) if len(q) else None,
            "final_energy": float(energy[-1]) if len(energy) else None,
            "time_energy_below_threshold": _time_below(energy, thr, h) if status == "ok" else None,
        }
        rep.update(_shape_report(cfg, q, v, h))
        return rep

    common = min(len(var), eul.q.shape[0])
    summary = {
        "mode": "compare-euler",
        "step": h,
        "steps": icfg.steps,
        "energy_threshold": thr,
        "variational": report(var.status, var.diverged_at, var.q, var.velocity, var.autonomous_energy),
        "euler": report(eul.status, eul.diverged_at, eul.q, eul.v, eul.energy),
        "max_trajectory_deviation": float(np.max(np.linalg.norm(var.q[:common] - eul.q[:common], axis=1))) if common else None,
    }
    _write_json(out / f"{prefix}_summary.json", summary)
    print(json.dumps({m: {k: summary[m][k] for k in ("status", "time_energy_below_threshold")} for m in ("variational", "euler")}))
    return EXIT_DIVERGED if var.diverged else EXIT_OK


def sweep_plan(cfg: ExperimentConfig, seed: Optional[int] = None) -> SweepPlan:
    sw = dict(cfg.section("sweep"))
    sw.pop("heatmap", None)
    if seed is not None:
        sw["seed"] = seed
    for key in ("region_lo", "region_hi", "grid_counts"):
        if key in sw:
            sw[key] = tuple(sw[key])
    return SweepPlan(
        shape=cfg.shape(),
        base_configuration=cfg.reference_configuration(),
        kappa=cfg.model_section["damping"],
        **sw,
    )


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    try:
        plan = sweep_plan(cfg, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc), source=cfg.source) from None
    h, r = plan.resolved_step()
    t0 = time.perf_counter()
    outcomes = run_campaign(plan, threads=max(1, args.threads))
    wall = time.perf_counter() - t0
    prefix = _prefix(cfg)
    write_outcomes_csv(outcomes, out / f"{prefix}_sweep.csv", plan.shape.ambient_dim)
    heatmap = None
    if cfg.section("sweep").get("heatmap", True):
        heatmap = out / f"{prefix}_heatmap.svg"
        emit_heatmap(outcomes, plan, heatmap)
    summary = {
        "mode": "sweep",
        "samples": len(outcomes),
        "seed": plan.seed,
        "step": h,
        "steps": r,
        "horizon": plan.horizon,
        "alpha": plan.alpha(),
        "converged": sum(o.converged for o in outcomes),
        "diverged": sum(o.diverged for o in outcomes),
        "converged_fraction": converged_fraction(outcomes),
        "heatmap": None if heatmap is None else heatmap.name,
        "wall_time_s": wall,
    }
    _write_json(out / f"{prefix}_summary.json", summary)
    print(f"converged {summary['converged']}/{len(outcomes)} ({summary['converged_fraction']:.1%}), "
          f"diverged {summary['diverged']}, h={h:.6g}, r={r}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path, args) -> int:
    model = cfg.model()
    ver = cfg.section("verify")
    integ = cfg.section("integrator")
    h = integ.get("step", 0.005)
    steps = integ.get("steps") or (int(round(integ["horizon"] / h)) if "horizon" in integ else 400)
    base = cfg.reference_configuration()
    init = cfg.section("initial")
    q0 = np.asarray(init["positions"], dtype=float) if "positions" in init else None
    if base is None:
        base = q0 if q0 is not None else np.zeros(model.dim)
    if q0 is None:
        q0 = base + 0.1 * np.random.default_rng(0).standard_normal(model.dim)
    v0 = np.asarray(init.get("velocities", np.zeros(model.dim)), dtype=float)
    seed = args.seed if args.seed is not None else ver.get("seed", 0)
    t0 = time.perf_counter()
    results = run_suite(
        model, base, h, steps, q0, v0, cfg.generators(),
        samples=ver.get("samples", 100),
        seed=seed,
        order_steps=ver.get("order_steps", (0.01, 0.005, 0.0025)),
        order_horizon=ver.get("order_horizon", 1.0),
        drift_steps=ver.get("drift_steps"),
        coefficient_perturbation=ver.get("coefficient_perturbation", 0.0),
    )
    report = {
        "mode": "verify",
        "passed": all(r.passed for r in results),
        "checks": [r.as_dict() for r in results],
        "wall_time_s": time.perf_counter() - t0,
    }
    _write_json(out / f"{_prefix(cfg)}_verify.json", report)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.value:.3e} (bound {r.bound:.3e}) {r.detail}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


COMMANDS = {
    "simulate": cmd_simulate,
    "compare-euler": cmd_compare_euler,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.mode != args.command:
            raise ConfigError(f"config mode is {cfg.mode!r}, command is {args.command!r}", source=cfg.source)
        out = _out_dir(args, cfg)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
