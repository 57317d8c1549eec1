"""Invariant checks shared by the ``verify`` command and the test-suite.

Each check returns a :class:`CheckResult` carrying the measured value next to
the bound it was held to, so reports stay machine-readable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    DampedLagrangianModel,
    IntegratorConfig,
    NoetherGenerator,
    del_residual,
    discrete_energy,
    autonomous_discrete_energy,
    discrete_momentum_post,
    discrete_momentum_pre,
    euler_reference_step,
    explicit_step,
    extended_energy_drift,
    free_particle,
    gradient_check,
    hamiltonian_step,
    hamiltonian_step_via_minus,
    hamiltonian_step_via_plus,
    integrate,
    invariance_probe,
    noether_drift,
    scaled_momentum_ratio,
    step_coefficients,
    symplecticity_defect,
)

__all__ = [
    "CheckResult",
    "rk4_solve",
    "observed_orders",
    "check_del_residual",
    "check_momentum_matching",
    "check_noether",
    "check_symplecticity",
    "check_flow_equivalence",
    "check_order",
    "check_extended_drift",
    "check_scaled_momentum",
    "check_gradient",
    "check_autonomous_reduction",
    "run_suite",
]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.passed))
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "bound", float(self.bound))

    def as_dict(self) -> dict:
        return asdict(self)


def rk4_solve(model: DampedLagrangianModel, q0, v0, horizon: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 on ``qdot = v, vdot = -c v - grad V``; returns ``(q, v)`` at ``horizon``."""
    n = int(round(horizon / h))
    if n < 1 or abs(n * h - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be an integer multiple of h")
    c, grad = model.damping, model.potential_gradient
    q, v = np.array(q0, dtype=float), np.array(v0, dtype=float)

    def acc(qq, vv):
        return -c * vv - grad(qq)

    for _ in range(n):
        k1q, k1v = v, acc(q, v)
        k2q, k2v = v + 0.5 * h * k1v, acc(q + 0.5 * h * k1q, v + 0.5 * h * k1v)
        k3q, k3v = v + 0.5 * h * k2v, acc(q + 0.5 * h * k2q, v + 0.5 * h * k2v)
        k4q, k4v = v + h * k3v, acc(q + h * k3q, v + h * k3v)
        q = q + h / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
        v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return q, v


def observed_orders(
    model: DampedLagrangianModel,
    q0,
    v0,
    steps: Sequence[float],
    horizon: float,
    start: str = "legendre",
    refine: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Final-time configuration errors against RK4 at ``min(steps) / refine``.

    Returns ``(errors, orders)`` with ``orders[i] = log2(errors[i] / errors[i+1])``
    scaled by the actual step ratio.
    """
    steps = list(steps)
    q_ref, _ = rk4_solve(model, q0, v0, horizon, min(steps) / refine)
    errs = []
    for h in steps:
        n = int(round(horizon / h))
        tr = integrate(model, IntegratorConfig(h, n, q0, v0, start))
        errs.append(np.linalg.norm(tr.q[n] - q_ref))
    errs = np.array(errs)
    ratios = np.array(steps[:-1]) / np.array(steps[1:])
    return errs, np.log(errs[:-1] / errs[1:]) / np.log(ratios)


def _near(rng, base, scale):
    return base + scale * rng.standard_normal(base.shape)


def check_del_residual(
    model,
    base,
    h: float,
    samples: int = 200,
    seed: int = 0,
    coefficient_perturbation: float = 0.0,
    tol: float = 1e-10,
) -> CheckResult:
    """Residual of the explicit update at random ``(k, q0, q1)``.

    ``coefficient_perturbation`` scales the increment coefficient by
    ``1 + perturbation``; a nonzero value is a negative control.
    """
    rng = np.random.default_rng(seed)
    co = step_coefficients(model.damping, h)
    worst = 0.0
    for _ in range(samples):
        k = int(rng.integers(0, 50))
        q0 = _near(rng, base, 0.3)
        q1 = q0 + h * rng.standard_normal(base.shape)
        if coefficient_perturbation:
            q2 = q1 + co.kappa * (1 + coefficient_perturbation) * (q1 - q0) - co.kappa_bar * model.potential_gradient(q1)
        else:
            q2 = explicit_step(model, k, h, q0, q1)
        res = np.linalg.norm(del_residual(model, k, h, q0, q1, q2))
        scale = np.exp(model.damping * (k + 1) * h) * (1 + np.linalg.norm(q1) / h)
        worst = max(worst, res / scale)
    return CheckResult("del_residual", worst <= tol, worst, tol, f"{samples} random steps at h={h:g}")


def check_momentum_matching(model, trajectory_config: IntegratorConfig, tol: float = 1e-10) -> CheckResult:
    tr = integrate(model, trajectory_config)
    h = trajectory_config.step
    worst = 0.0
    for k in range(len(tr) - 2):
        post = discrete_momentum_post(model, k, h, tr.q[k], tr.q[k + 1])
        pre = discrete_momentum_pre(model, k + 1, h, tr.q[k + 1], tr.q[k + 2])
        # same homogeneous scale as the residual check: both sides carry the weight a_{k+1}
        scale = np.exp(model.damping * (k + 1) * h) * (1 + np.linalg.norm(tr.q[k + 1]) / h)
        worst = max(worst, np.max(np.abs(post - pre)) / scale)
    return CheckResult("momentum_matching", worst <= tol, worst, tol)


def check_noether(
    model, config: IntegratorConfig, generators: Sequence[NoetherGenerator], tol: float = 1e-9, probe_tol: float = 1e-6
) -> CheckResult:
    usable = [g for g in generators if invariance_probe(model, g, samples=8) <= probe_tol]
    if not usable:
        return CheckResult("noether_conservation", True, 0.0, tol, "no generator leaves V invariant")
    tr = integrate(model, config, usable)
    drift = noether_drift(tr, usable)
    worst = float(np.max(drift))
    names = ",".join(g.name for g in usable)
    return CheckResult("noether_conservation", worst <= tol, worst, tol, f"{len(tr) - 1} steps, generators {names}")


def check_symplecticity(
    model, base, h: float, samples: int = 20, seed: int = 0, fd_step: float = 1e-5, tol: float = 1e-6
) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        k = int(rng.integers(0, 6))
        q = _near(rng, base, 0.05)
        p = 0.1 * rng.standard_normal(base.shape)
        worst = max(worst, symplecticity_defect(model, k, h, q, p, fd_step))
    bound = max(tol, 10 * fd_step**2)
    return CheckResult("symplecticity", worst <= bound, worst, bound, f"{samples} states at h={h:g}")


def euler_phase_map(model, h: float) -> Callable:
    """Explicit Euler lifted to ``(q, p)`` with ``p = v`` (the weight is 1 at ``t = 0``)."""

    def step(q, p):
        return euler_reference_step(model, h, q, p)

    return step


def check_flow_equivalence(model, base, h: float, samples: int = 100, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        k = int(rng.integers(1, 20))
        q = _near(rng, base, 0.3)
        p = rng.standard_normal(base.shape)
        q1, p1 = hamiltonian_step(model, k, h, q, p)
        q2, p2 = hamiltonian_step_via_minus(model, k, h, q, p)
        q3, p3 = hamiltonian_step_via_plus(model, k, h, q, p)
        scale = max(1.0, np.max(np.abs(p1)), np.max(np.abs(q1)))
        diff = max(np.max(np.abs(q1 - q2)), np.max(np.abs(q1 - q3)), np.max(np.abs(p1 - p2)), np.max(np.abs(p1 - p3)))
        worst = max(worst, diff / scale)
    return CheckResult("flow_equivalence", worst <= tol, worst, tol)


def check_order(model, q0, v0, steps=(0.01, 0.005, 0.0025), horizon: float = 1.0, target: float = 2.0, tol: float = 0.2) -> CheckResult:
    errs, orders = observed_orders(model, q0, v0, steps, horizon)
    dev = float(np.max(np.abs(orders - target)))
    detail = "errors " + ", ".join(f"{e:.3e}" for e in errs) + "; orders " + ", ".join(f"{o:.3f}" for o in orders)
    return CheckResult("order", dev <= tol, float(np.min(orders)), target - tol, detail)


def check_extended_drift(model, q0, v0, h: float, steps: int, lo: float = 3.2, hi: float = 4.8) -> CheckResult:
    d1 = extended_energy_drift(model, IntegratorConfig(h, steps, q0, v0, "legendre"))
    d2 = extended_energy_drift(model, IntegratorConfig(h / 2, 2 * steps, q0, v0, "legendre"))
    m1, m2 = float(np.max(np.abs(d1))), float(np.max(np.abs(d2)))
    if m2 == 0.0:
        ok = m1 <= 1e-12
        return CheckResult("extended_drift_ratio", ok, m1, 1e-12, "drift vanishes")
    ratio = m1 / m2
    return CheckResult("extended_drift_ratio", lo <= ratio <= hi, ratio, 4.0, f"max drift {m1:.3e} at h, {m2:.3e} at h/2")


def check_scaled_momentum(damping: float, h: float, dim: int = 3, tol: float = 1e-12) -> CheckResult:
    model = free_particle(dim, damping)
    gen = NoetherGenerator.translation(np.eye(dim)[0])
    v0 = np.zeros(dim)
    v0[0] = 1.0
    tr = integrate(model, IntegratorConfig(h, 200, np.zeros(dim), v0))
    ratios = scaled_momentum_ratio(model, gen, tr)
    dev = float(np.max(np.abs(ratios - np.exp(-damping * h))))
    return CheckResult("scaled_momentum_ratio", dev <= tol, dev, tol)


def check_gradient(model, base, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    worst = gradient_check(model, samples=16, seed=seed, center=base, scale=0.5)
    return CheckResult("gradient_consistency", worst <= tol, worst, tol)


def check_autonomous_reduction(model, base, h: float, samples: int = 50, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """With ``c = 0`` the update is Stormer-Verlet and the two energies coincide."""
    if model.damping != 0.0:
        raise ValueError("autonomous reduction needs zero damping")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        k = int(rng.integers(0, 100))
        q0 = _near(rng, base, 0.3)
        q1 = q0 + h * rng.standard_normal(base.shape)
        g = model.potential_gradient(q1)
        verlet = 2 * q1 - q0 - h * h * g
        step = explicit_step(model, k, h, q0, q1)
        e_w = discrete_energy(model, k, h, q0, q1)
        e_a = autonomous_discrete_energy(model, h, q0, q1)
        # velocity Verlet in (q, p): half kick, drift, half kick
        p = rng.standard_normal(base.shape)
        p_half = p - 0.5 * h * model.potential_gradient(q0)
        q_new = q0 + h * p_half
        p_new = p_half - 0.5 * h * model.potential_gradient(q_new)
        qh, ph = hamiltonian_step(model, k, h, q0, p)
        scale = max(1.0, np.max(np.abs(q1)))
        worst = max(
            worst,
            np.max(np.abs(step - verlet)) / scale,
            abs(e_w - h * e_a) / max(1.0, abs(h * e_a)),
            np.max(np.abs(qh - q_new)) / scale,
            np.max(np.abs(ph - p_new)) / max(1.0, np.max(np.abs(p_new))),
        )
    return CheckResult("autonomous_reduction", worst <= tol, worst, tol, "Stormer-Verlet and energy identities")


def run_suite(
    model: DampedLagrangianModel,
    base: np.ndarray,
    h: float,
    steps: int,
    q0,
    v0,
    generators: Sequence[NoetherGenerator] = (),
    samples: int = 100,
    seed: int = 0,
    order_steps: Sequence[float] = (0.01, 0.005, 0.0025),
    order_horizon: float = 1.0,
    drift_steps: Optional[int] = None,
    coefficient_perturbation: float = 0.0,
) -> list[CheckResult]:
    """All invariant checks for one model; adds the ``c = 0`` subset when undamped."""
    base = np.asarray(base, dtype=float)
    cfg = IntegratorConfig(h, max(steps, 400), q0, v0)
    results = [
        check_gradient(model, base, seed),
        check_del_residual(model, base, h, samples, seed, coefficient_perturbation),
        check_momentum_matching(model, IntegratorConfig(h, steps, q0, v0)),
        check_noether(model, cfg, generators),
        check_symplecticity(model, base, h, min(samples, 20), seed),
        check_flow_equivalence(model, base, h, samples, seed),
        check_order(model, q0, v0, order_steps, order_horizon),
        check_extended_drift(model, q0, v0, h, drift_steps or steps),
        check_scaled_momentum(model.damping, h),
    ]
    if model.damping == 0.0:
        results.append(check_autonomous_reduction(model, base, h, seed=seed))
    return results
