"""Region-of-attraction sweeps: displace one agent, integrate, classify.

All samples of a batch are advanced together as one ``(B, n*d)`` array, so a
3000-sample campaign costs a few hundred vectorized steps.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DEFAULT_OVERFLOW_GUARD, step_coefficients
from .formation import (
    FormationShape,
    congruence_discrepancy,
    formation_gradient,
    max_agent_speed,
    step_size_bound_alpha,
)

__all__ = [
    "SweepPlan",
    "SweepOutcome",
    "run_campaign",
    "classify_outcome",
    "write_outcomes_csv",
    "read_outcomes_csv",
    "emit_heatmap",
    "converged_fraction",
    "outcome_class",
    "HEATMAP_COLORS",
]

DEFAULT_MAX_STEP = 0.014


@dataclass(frozen=True)
class SweepPlan:
    """One-agent displacement campaign.

    The displaced agent's start is drawn from the box ``[region_lo,
    region_hi]`` (a degenerate axis pins that coordinate); everyone else sits
    on ``base_configuration`` and all agents start at rest.
    """

    shape: FormationShape
    base_configuration: np.ndarray
    displaced_agent: int
    region_lo: tuple
    region_hi: tuple
    sampling: str = "uniform"
    count: int = 3000
    grid_counts: Optional[tuple] = None
    seed: int = 0
    kappa: float = 13.0
    horizon: float = 5.0
    h: Optional[float] = None
    dist_tol_rel: float = 0.01
    vel_tol: float = 0.1
    convergence_threshold: Optional[int] = None
    enforce_alpha: bool = False
    c_ball: float = 1.0
    R_ball: float = 1.0
    overflow_guard: float = DEFAULT_OVERFLOW_GUARD

    def __post_init__(self):
        d = self.shape.ambient_dim
        base = np.asarray(self.base_configuration, dtype=float)
        if base.shape != (self.shape.dim,):
            raise ValueError(f"base configuration must have length {self.shape.dim}")
        object.__setattr__(self, "base_configuration", base)
        lo, hi = tuple(map(float, self.region_lo)), tuple(map(float, self.region_hi))
        if len(lo) != d or len(hi) != d or any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"sample region must be a box in R^{d} with lo <= hi")
        object.__setattr__(self, "region_lo", lo)
        object.__setattr__(self, "region_hi", hi)
        if not 0 <= self.displaced_agent < self.shape.n:
            raise ValueError(f"displaced agent {self.displaced_agent} out of range")
        if self.sampling == "grid":
            if self.grid_counts is None or len(self.grid_counts) != d or min(self.grid_counts) < 1:
                raise ValueError(f"grid sampling needs {d} positive per-axis counts")
        elif self.sampling == "uniform":
            if self.count < 1:
                raise ValueError("sample count must be >= 1")
        else:
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.enforce_alpha:
            h, _ = self.resolved_step()
            alpha = self.alpha()
            if h > alpha:
                raise ValueError(f"step {h:g} exceeds the stability bound alpha={alpha:g}")

    def alpha(self) -> float:
        return step_size_bound_alpha(self.shape, self.kappa, self.c_ball, self.R_ball)

    def resolved_step(self) -> tuple[float, int]:
        """``(h, r)`` with ``h * r == horizon`` and ``h`` at most the requested step.

        Without an explicit ``h`` the cap is ``min(alpha, 0.014)``.
        """
        cap = self.h if self.h is not None else min(self.alpha(), DEFAULT_MAX_STEP)
        if cap <= 0:
            raise ValueError("step size must be positive")
        r = max(2, math.ceil(self.horizon / cap - 1e-9))
        return self.horizon / r, r

    @property
    def sample_count(self) -> int:
        return int(np.prod(self.grid_counts)) if self.sampling == "grid" else self.count

    def samples(self) -> np.ndarray:
        """Initial positions of the displaced agent, shape ``(S, d)``."""
        lo, hi = np.array(self.region_lo), np.array(self.region_hi)
        if self.sampling == "uniform":
            rng = np.random.default_rng(self.seed)
            return lo + (hi - lo) * rng.random((self.count, lo.size))
        axes = [
            np.linspace(a, b, m) if m > 1 else np.array([(a + b) / 2])
            for a, b, m in zip(lo, hi, self.grid_counts)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def desired_position(self) -> np.ndarray:
        d = self.shape.ambient_dim
        i = self.displaced_agent
        return self.base_configuration[i * d : (i + 1) * d]


@dataclass(frozen=True)
class SweepOutcome:
    sample_index: int
    initial_position: tuple
    converged: bool
    diverged: bool
    steps_to_converge: Optional[int]
    final_discrepancy: float
    final_max_speed: float


def _first_stable_step(ok: np.ndarray) -> np.ndarray:
    """Per column of ``ok[k, b]``: first ``k`` from which every later entry is true, or -1."""
    n = ok.shape[0]
    fails = ~ok
    any_fail = fails.any(axis=0)
    last_fail = n - 1 - np.argmax(fails[::-1], axis=0)
    out = np.where(any_fail, last_fail + 1, 0)
    return np.where(ok[-1], out, -1)


def _to_outcomes(indices, starts, ok_series, alive, disc, speed, threshold):
    first = _first_stable_step(ok_series)
    out = []
    for b, idx in enumerate(indices):
        diverged = not alive[b]
        steps = None if diverged or first[b] < 0 else int(first[b])
        converged = steps is not None and steps <= threshold
        out.append(
            SweepOutcome(
                sample_index=int(idx),
                initial_position=tuple(float(x) for x in starts[b]),
                converged=converged,
                diverged=diverged,
                steps_to_converge=steps,
                final_discrepancy=float(disc[b]),
                final_max_speed=float(speed[b]),
            )
        )
    return out


def _run_batch(plan: SweepPlan, indices: np.ndarray, starts: np.ndarray) -> list[SweepOutcome]:
    shape = plan.shape
    d = shape.ambient_dim
    h, r = plan.resolved_step()
    co = step_coefficients(plan.kappa, h)
    b = len(indices)
    base = plan.base_configuration
    q = np.repeat(base[None, :], b, axis=0)
    i = plan.displaced_agent
    q[:, i * d : (i + 1) * d] = starts
    dq = np.zeros_like(q)  # at rest: q_1 = q_0
    alive = np.ones(b, dtype=bool)
    ok = np.zeros((r + 1, b), dtype=bool)
    disc = np.full(b, np.nan)
    speed = np.full(b, np.nan)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(r + 1):
            q_next = q + dq
            bad = ~np.isfinite(q_next).all(axis=1) | (np.abs(q_next).max(axis=1) > plan.overflow_guard)
            alive &= ~bad
            q_next[~alive] = base
            dq[~alive] = 0.0
            # point k carries velocity (q_{k+1} - q_k) / h
            disc = congruence_discrepancy(base, q, d)
            speed = max_agent_speed(dq / h, d)
            ok[k] = alive & (disc < plan.dist_tol_rel) & (speed < plan.vel_tol)
            if k == r:
                break
            dq = co.kappa * dq - co.kappa_bar * formation_gradient(shape, q_next)
            q = q_next
    disc = np.where(alive, disc, np.nan)
    speed = np.where(alive, speed, np.nan)
    threshold = r if plan.convergence_threshold is None else plan.convergence_threshold
    return _to_outcomes(indices, starts, ok, alive, disc, speed, threshold)


def run_campaign(plan: SweepPlan, threads: int = 1, batch_size: int = 1024) -> list[SweepOutcome]:
    """Integrate every sample of ``plan``; results ordered by sample index.

    Batches run on a pool of ``threads`` workers. Samples are independent, so
    the output does not depend on ``threads`` or ``batch_size``.
    """
    starts = plan.samples()
    idx = np.arange(len(starts))
    chunks = [(idx[s : s + batch_size], starts[s : s + batch_size]) for s in range(0, len(starts), batch_size)]
    if threads <= 1 or len(chunks) == 1:
        results = [_run_batch(plan, i, s) for i, s in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _run_batch(plan, *c), chunks))
    outcomes = [o for batch in results for o in batch]
    outcomes.sort(key=lambda o: o.sample_index)
    return outcomes


def classify_outcome(
    shape: FormationShape,
    base_configuration,
    trajectory,
    dist_tol_rel: float = 0.01,
    vel_tol: float = 0.1,
    threshold: Optional[int] = None,
) -> dict:
    """Classification fields for a single run from :func:`dampedvi.core.integrate`.

    Also accepts an :class:`~dampedvi.core.EulerTrajectory` (uses its ``v``).
    """
    d = shape.ambient_dim
    q = np.asarray(trajectory.q)
    v = np.asarray(trajectory.velocity if hasattr(trajectory, "velocity") else trajectory.v)
    if getattr(trajectory, "diverged", False) or len(q) == 0:
        return dict(converged=False, diverged=True, steps_to_converge=None,
                    final_discrepancy=float("nan"), final_max_speed=float("nan"))
    disc = congruence_discrepancy(base_configuration, q, d)
    speed = max_agent_speed(v, d)
    ok = (disc < dist_tol_rel) & (speed < vel_tol)
    first = int(_first_stable_step(ok[:, None])[0])
    steps = None if first < 0 else first
    limit = len(q) - 1 if threshold is None else threshold
    return dict(
        converged=steps is not None and steps <= limit,
        diverged=False,
        steps_to_converge=steps,
        final_discrepancy=float(disc[-1]),
        final_max_speed=float(speed[-1]),
    )


def converged_fraction(outcomes: Sequence[SweepOutcome]) -> float:
    return sum(o.converged for o in outcomes) / len(outcomes) if outcomes else 0.0


# ---------------------------------------------------------------------------
# artifacts

_AXES = ("x0", "y0", "z0")


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_outcomes_csv(outcomes: Sequence[SweepOutcome], path, ambient_dim: int) -> None:
    header = ["sample_index", *_AXES[:ambient_dim], "converged", "diverged",
              "steps_to_converge", "final_discrepancy", "final_max_speed"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for o in outcomes:
            w.writerow([
                o.sample_index,
                *(_fmt(x) for x in o.initial_position),
                int(o.converged),
                int(o.diverged),
                -1 if o.steps_to_converge is None else o.steps_to_converge,
                _fmt(o.final_discrepancy),
                _fmt(o.final_max_speed),
            ])


def read_outcomes_csv(path) -> list[SweepOutcome]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        pos = tuple(float(row[a]) for a in _AXES if a in row)
        steps = int(row["steps_to_converge"])
        out.append(SweepOutcome(
            sample_index=int(row["sample_index"]),
            initial_position=pos,
            converged=row["converged"] == "1",
            diverged=row["diverged"] == "1",
            steps_to_converge=None if steps < 0 else steps,
            final_discrepancy=float(row["final_discrepancy"]),
            final_max_speed=float(row["final_max_speed"]),
        ))
    return out


HEATMAP_COLORS = {"converged": "#2ca02c", "not_converged": "#d62728", "diverged": "#7f7f7f"}


def outcome_class(o: SweepOutcome) -> str:
    if o.diverged:
        return "diverged"
    return "converged" if o.converged else "not_converged"


def _plot_axes(plan: SweepPlan) -> tuple[int, int]:
    spread = [i for i, (a, b) in enumerate(zip(plan.region_lo, plan.region_hi)) if b > a]
    if len(spread) > 2:
        raise ValueError("heatmap needs a 2D region or a 2D slice (one degenerate axis)")
    rest = [i for i in range(len(plan.region_lo)) if i not in spread]
    return tuple((spread + rest)[:2])


def emit_heatmap(outcomes: Sequence[SweepOutcome], plan: SweepPlan, path) -> None:
    """Basin map as SVG: one marker per sample, one ``<g id=...>`` group per class."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    ix, iy = _plot_axes(plan)
    with matplotlib.rc_context({"svg.hashsalt": "dampedvi", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 6))
        for cls, color in HEATMAP_COLORS.items():
            pts = np.array([o.initial_position for o in outcomes if outcome_class(o) == cls]).reshape(-1, len(plan.region_lo))
            sc = ax.scatter(pts[:, ix], pts[:, iy], s=12, c=color, marker="s",
                            linewidths=0, label=cls.replace("_", " "))
            sc.set_gid(cls)
        target = plan.desired_position()
        (mk,) = ax.plot([target[ix]], [target[iy]], marker="x", color="k", ms=10,
                        linestyle="none", label="desired position")
        mk.set_gid("desired")
        ax.set_xlim(plan.region_lo[ix], plan.region_hi[ix] if plan.region_hi[ix] > plan.region_lo[ix] else plan.region_lo[ix] + 1)
        ax.set_ylim(plan.region_lo[iy], plan.region_hi[iy] if plan.region_hi[iy] > plan.region_lo[iy] else plan.region_lo[iy] + 1)
        ax.set_xlabel("xyz"[ix])
        ax.set_ylabel("xyz"[iy])
        ax.set_aspect("equal")
        ax.legend(loc="upper right", fontsize=8)
        ax.set_title(f"agent {plan.displaced_agent}: converged {converged_fraction(outcomes):.1%}")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
