"""Trapezoidal variational integrator for exponentially damped Lagrangians.

The model family is

    L(t, q, qdot) = exp(c t) * (0.5 * |qdot|^2 - V(q)),

whose Euler-Lagrange equations are ``qddot = -c qdot - grad V(q)``; ``c > 0``
dissipates. One step of the discrete Lagrangian is the trapezoidal rule on the
grid ``t_k = k h`` with weights ``a_k = exp(c k h)``:

    L_d^k(q0, q1) = (a_k + a_{k+1}) |q1 - q0|^2 / (4 h)
                    - (h / 2) (a_k V(q0) + a_{k+1} V(q1)).

Every other quantity here (momenta, the explicit update, the phase-space map,
Noether charges, energies) is derived from that formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "NonFiniteInputError",
    "DampedLagrangianModel",
    "IntegratorConfig",
    "PhasePoint",
    "Trajectory",
    "NoetherGenerator",
    "StepCoefficients",
    "free_particle",
    "harmonic_oscillator",
    "gradient_check",
    "weight",
    "lagrangian",
    "energy_function",
    "energy_rate",
    "discrete_lagrangian",
    "d1_discrete_lagrangian",
    "d2_discrete_lagrangian",
    "del_residual",
    "step_coefficients",
    "explicit_step",
    "discrete_flow",
    "integrate",
    "discrete_momentum_pre",
    "discrete_momentum_post",
    "legendre_plus",
    "legendre_minus",
    "inverse_legendre_plus",
    "inverse_legendre_minus",
    "hamiltonian_step",
    "hamiltonian_step_via_minus",
    "hamiltonian_step_via_plus",
    "symplecticity_defect",
    "noether_charge",
    "scaled_momentum_ratio",
    "noether_drift",
    "discrete_energy",
    "autonomous_discrete_energy",
    "continuous_hamiltonian",
    "extended_lagrangian",
    "extended_lagrangian_time_partials",
    "extended_energy_drift",
    "euler_reference_step",
    "euler_integrate",
    "invariance_probe",
    "se_generators",
]

DEFAULT_OVERFLOW_GUARD = 1e12


class NonFiniteInputError(ValueError):
    """Raised when an operation receives NaN or infinite input."""


def _vec(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains non-finite values: {arr!r}")
    return arr


def _check_step(h) -> None:
    if not np.isfinite(h) or h <= 0:
        raise ValueError(f"step size must be a positive finite number, got {h!r}")


@dataclass(frozen=True)
class DampedLagrangianModel:
    """``L = exp(c t) (0.5 |qdot|^2 - V(q))`` on ``R^dim``.

    Attributes:
        dim: configuration dimension (``n * d`` for ``n`` agents in ``R^d``).
        damping: rate ``c``; positive values dissipate.
        potential: ``q -> V(q)``.
        potential_gradient: ``q -> grad V(q)``.
        name: free-form label used in reports.
    """

    dim: int
    damping: float
    potential: Callable[[np.ndarray], float]
    potential_gradient: Callable[[np.ndarray], np.ndarray]
    name: str = "model"

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim!r}")
        if not np.isfinite(self.damping):
            raise ValueError(f"damping must be finite, got {self.damping!r}")


def free_particle(dim: int, damping: float = 0.0) -> DampedLagrangianModel:
    """Damped free particle, ``V = 0``."""
    return DampedLagrangianModel(
        dim=dim,
        damping=damping,
        potential=lambda q: 0.0 * np.sum(q),
        potential_gradient=lambda q: np.zeros_like(q),
        name="free",
    )


def harmonic_oscillator(
    dim: int = 1, damping: float = 0.0, stiffness: float = 1.0
) -> DampedLagrangianModel:
    """Damped isotropic oscillator, ``V = 0.5 * stiffness * |q|^2``."""
    return DampedLagrangianModel(
        dim=dim,
        damping=damping,
        potential=lambda q: 0.5 * stiffness * np.dot(q, q),
        potential_gradient=lambda q: stiffness * np.asarray(q),
        name="harmonic",
    )


def gradient_check(
    model: DampedLagrangianModel,
    samples: int = 8,
    seed: int = 0,
    scale: float = 1.0,
    fd_step: float = 1e-5,
    center=None,
) -> float:
    """Worst relative mismatch between ``potential_gradient`` and central differences.

    Probes are ``center + scale * N(0, I)``, with ``center`` defaulting to 0.
    """
    rng = np.random.default_rng(seed)
    origin = np.zeros(model.dim) if center is None else _vec(center, "center")
    worst = 0.0
    for _ in range(samples):
        q = origin + scale * rng.standard_normal(model.dim)
        g = np.asarray(model.potential_gradient(q), dtype=float)
        fd = np.empty(model.dim)
        for i in range(model.dim):
            e = np.zeros(model.dim)
            e[i] = fd_step
            fd[i] = (model.potential(q + e) - model.potential(q - e)) / (2 * fd_step)
        denom = max(1.0, np.max(np.abs(g)))
        worst = max(worst, float(np.max(np.abs(g - fd)) / denom))
    return worst


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step run: ``steps`` updates of size ``step`` from ``(q(0), v(0))``.

    ``start="forward"`` seeds ``q_1 = q_0 + h v(0)``. ``start="legendre"`` instead
    treats ``p_0 = v(0)`` as the initial momentum (``p = exp(c t) qdot`` at
    ``t = 0``) and inverts the discrete Legendre transform, which keeps the
    start second-order accurate.
    """

    step: float
    steps: int
    initial_position: np.ndarray
    initial_velocity: np.ndarray
    start: str = "forward"

    def __post_init__(self):
        _check_step(self.step)
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError(f"steps must be an integer >= 2, got {self.steps!r}")
        q0 = _vec(self.initial_position, "initial_position")
        v0 = _vec(self.initial_velocity, "initial_velocity")
        if q0.shape != v0.shape or q0.ndim != 1:
            raise ValueError(
                f"initial position/velocity must be vectors of equal length, "
                f"got shapes {q0.shape} and {v0.shape}"
            )
        if self.start not in ("forward", "legendre"):
            raise ValueError(f"unknown start rule {self.start!r}")
        object.__setattr__(self, "initial_position", q0)
        object.__setattr__(self, "initial_velocity", v0)


@dataclass(frozen=True)
class PhasePoint:
    k: int
    t: float
    q: np.ndarray
    p: np.ndarray
    velocity: np.ndarray
    mu: Optional[float] = None


@dataclass
class Trajectory:
    """Configuration samples ``q_0 .. q_{M-1}`` with per-step diagnostics.

    Row ``k`` of ``velocity``, ``momentum``, ``energy``, ``autonomous_energy``
    and ``charges`` is built from the pair ``(q_k, q_{k+1})``; the final row
    uses one extra update that is not stored as a point. ``del_residual[k]``
    is the norm of the discrete Euler-Lagrange residual at ``(q_k, q_{k+1},
    q_{k+2})`` and has ``M - 1`` entries.
    """

    step: float
    damping: float
    q: np.ndarray
    velocity: np.ndarray
    momentum: np.ndarray
    energy: np.ndarray
    autonomous_energy: np.ndarray
    charges: np.ndarray
    del_residual: np.ndarray
    generator_names: tuple = ()
    status: str = "ok"
    diverged_at: Optional[int] = None
    mu: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @property
    def k(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def t(self) -> np.ndarray:
        return self.k * self.step

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def points(self) -> Iterator[PhasePoint]:
        for k in range(len(self)):
            yield PhasePoint(
                k=k,
                t=k * self.step,
                q=self.q[k],
                p=self.momentum[k],
                velocity=self.velocity[k],
                mu=None if self.mu is None else self.mu[k],
            )


@dataclass(frozen=True)
class NoetherGenerator:
    """Infinitesimal rigid motion of ``R^d`` applied to every agent block.

    Use :meth:`translation`, :meth:`rotation` or :meth:`rotation_about`.
    """

    kind: str
    ambient_dim: int
    direction: Optional[tuple] = None
    plane: Optional[tuple] = None
    axis: Optional[tuple] = None
    label: str = field(default="", compare=False)

    def __post_init__(self):
        d = self.ambient_dim
        if self.kind == "translation":
            a = np.asarray(self.direction, dtype=float)
            if a.shape != (d,) or not np.isclose(np.linalg.norm(a), 1.0, atol=1e-12):
                raise ValueError(f"translation direction must be a unit {d}-vector")
        elif self.kind == "rotation":
            if self.axis is not None:
                if d != 3 or np.asarray(self.axis).shape != (3,):
                    raise ValueError("axis rotations need ambient_dim 3")
                if not np.isclose(np.linalg.norm(self.axis), 1.0, atol=1e-12):
                    raise ValueError("rotation axis must have unit norm")
            else:
                i, j = self.plane
                if i == j or not (0 <= i < d and 0 <= j < d):
                    raise ValueError(f"bad rotation plane {self.plane} for d={d}")
        else:
            raise ValueError(f"unknown generator kind {self.kind!r}")

    @classmethod
    def translation(cls, direction, label: str = "") -> "NoetherGenerator":
        a = np.asarray(direction, dtype=float)
        norm = np.linalg.norm(a)
        if not norm > 0:
            raise ValueError("translation direction must be nonzero")
        a = a / norm
        return cls("translation", a.size, direction=tuple(a), label=label)

    @classmethod
    def rotation(cls, i: int, j: int, ambient_dim: int, label: str = "") -> "NoetherGenerator":
        """Rotation taking axis ``i`` towards axis ``j``: ``xi = q_i d/dq_j - q_j d/dq_i``."""
        return cls("rotation", ambient_dim, plane=(i, j), label=label)

    @classmethod
    def rotation_about(cls, axis, label: str = "") -> "NoetherGenerator":
        w = np.asarray(axis, dtype=float)
        return cls("rotation", 3, axis=tuple(w / np.linalg.norm(w)), label=label)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "translation":
            return "T[" + ",".join(f"{x:g}" for x in self.direction) + "]"
        if self.axis is not None:
            return "R[" + ",".join(f"{x:g}" for x in self.axis) + "]"
        return f"R{self.plane[0]}{self.plane[1]}"

    def _blocks(self, q: np.ndarray) -> np.ndarray:
        d = self.ambient_dim
        if q.shape[-1] % d:
            raise ValueError(f"dimension {q.shape[-1]} is not a multiple of {d}")
        return q.reshape(q.shape[:-1] + (q.shape[-1] // d, d))

    def __call__(self, q) -> np.ndarray:
        """Evaluate the vector field ``xi_Q(q)``; accepts batches on leading axes."""
        q = np.asarray(q)
        b = self._blocks(q)
        if self.kind == "translation":
            out = np.broadcast_to(np.asarray(self.direction, dtype=q.dtype), b.shape).copy()
        elif self.axis is not None:
            out = np.cross(np.asarray(self.axis, dtype=q.dtype), b)
        else:
            i, j = self.plane
            out = np.zeros_like(b)
            out[..., i] = -b[..., j]
            out[..., j] = b[..., i]
        return out.reshape(q.shape)

    def act(self, q, eps: float) -> np.ndarray:
        """Group action ``exp(eps * xi) . q`` (exact translation/rotation)."""
        q = np.asarray(q, dtype=float)
        b = self._blocks(q)
        if self.kind == "translation":
            out = b + eps * np.asarray(self.direction)
        else:
            out = b @ self._rotation_matrix(eps).T
        return out.reshape(q.shape)

    def _rotation_matrix(self, eps: float) -> np.ndarray:
        d = self.ambient_dim
        gen = np.zeros((d, d))
        if self.axis is not None:
            wx, wy, wz = self.axis
            gen = np.array([[0, -wz, wy], [wz, 0, -wx], [-wy, wx, 0]])
        else:
            i, j = self.plane
            gen[j, i] = 1.0
            gen[i, j] = -1.0
        # gen^3 = -gen for unit rotations, so the exponential is Rodrigues' formula
        return np.eye(d) + np.sin(eps) * gen + (1 - np.cos(eps)) * gen @ gen


def se_generators(ambient_dim: int) -> list[NoetherGenerator]:
    """Basis of se(d): ``d`` translations followed by ``d(d-1)/2`` rotations."""
    d = ambient_dim
    gens = [NoetherGenerator.translation(np.eye(d)[i], label=f"T{i}") for i in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            gens.append(NoetherGenerator.rotation(i, j, d, label=f"R{i}{j}"))
    return gens


# ---------------------------------------------------------------------------
# continuous side


def weight(model: DampedLagrangianModel, k, h):
    """``a_k = exp(c k h)``, evaluated from ``k`` directly (never accumulated)."""
    return np.exp(model.damping * (k * h))


def lagrangian(model: DampedLagrangianModel, t, q, v) -> float:
    v = np.asarray(v)
    return np.exp(model.damping * t) * (0.5 * np.dot(v, v) - model.potential(q))


def energy_function(model: DampedLagrangianModel, t, q, v) -> float:
    """``E_L = v . dL/dv - L = exp(c t) (0.5 |v|^2 + V)``."""
    v = np.asarray(v)
    return np.exp(model.damping * t) * (0.5 * np.dot(v, v) + model.potential(q))


def energy_rate(model: DampedLagrangianModel, t, q, v) -> float:
    """``dE_L/dt`` along solutions, which equals ``-dL/dt|_explicit = -c L``."""
    return -model.damping * lagrangian(model, t, q, v)


def continuous_hamiltonian(model: DampedLagrangianModel, t, q, p) -> float:
    """``H = 0.5 exp(-c t) |p|^2 + exp(c t) V(q)`` (Legendre map ``p = exp(c t) qdot``)."""
    p = np.asarray(p)
    c = model.damping
    return 0.5 * np.exp(-c * t) * np.dot(p, p) + np.exp(c * t) * model.potential(q)


# ---------------------------------------------------------------------------
# discrete Lagrangian and its partial derivatives


def discrete_lagrangian(model: DampedLagrangianModel, k: int, h: float, q0, q1) -> float:
    _check_step(h)
    q0, q1 = _vec(q0, "q0"), _vec(q1, "q1")
    a0, a1 = weight(model, k, h), weight(model, k + 1, h)
    dq = q1 - q0
    return (a0 + a1) * np.dot(dq, dq) / (4 * h) - 0.5 * h * (
        a0 * model.potential(q0) + a1 * model.potential(q1)
    )


def _d1(model, k, h, q0, dq, g0):
    a0, a1 = weight(model, k, h), weight(model, k + 1, h)
    return -(a0 + a1) / (2 * h) * dq - 0.5 * h * a0 * g0


def _d2(model, k, h, dq, g1):
    a0, a1 = weight(model, k, h), weight(model, k + 1, h)
    return (a0 + a1) / (2 * h) * dq - 0.5 * h * a1 * g1


def d1_discrete_lagrangian(model, k, h, q0, q1) -> np.ndarray:
    """Partial derivative of ``L_d^k`` in its first slot."""
    _check_step(h)
    q0, q1 = _vec(q0, "q0"), _vec(q1, "q1")
    return _d1(model, k, h, q0, q1 - q0, np.asarray(model.potential_gradient(q0)))


def d2_discrete_lagrangian(model, k, h, q0, q1) -> np.ndarray:
    """Partial derivative of ``L_d^k`` in its second slot."""
    _check_step(h)
    q0, q1 = _vec(q0, "q0"), _vec(q1, "q1")
    return _d2(model, k, h, q1 - q0, np.asarray(model.potential_gradient(q1)))


def del_residual(model, k: int, h: float, q0, q1, q2) -> np.ndarray:
    """``D1 L_d^{k+1}(q1, q2) + D2 L_d^k(q0, q1)``; zero on discrete solutions."""
    _check_step(h)
    q0, q1, q2 = _vec(q0, "q0"), _vec(q1, "q1"), _vec(q2, "q2")
    g1 = np.asarray(model.potential_gradient(q1))
    return _d1(model, k + 1, h, q1, q2 - q1, g1) + _d2(model, k, h, q1 - q0, g1)


def discrete_momentum_pre(model, k, h, q0, q1) -> np.ndarray:
    """``p_k^- = -D1 L_d^k(q_k, q_{k+1})``."""
    return -d1_discrete_lagrangian(model, k, h, q0, q1)


def discrete_momentum_post(model, k, h, q0, q1) -> np.ndarray:
    """``p_{k+1}^+ = D2 L_d^k(q_k, q_{k+1})``."""
    return d2_discrete_lagrangian(model, k, h, q0, q1)


# ---------------------------------------------------------------------------
# explicit update


@dataclass(frozen=True)
class StepCoefficients:
    """``q_{k+2} = kappa_hat q_{k+1} - kappa q_k - kappa_bar grad V(q_{k+1})``."""

    kappa: float
    kappa_hat: float
    kappa_bar: float


def step_coefficients(damping: float, h: float) -> StepCoefficients:
    """Closed-form solution of the trapezoidal discrete Euler-Lagrange equation.

    Multiplying the residual by ``2h / a_{k+1}`` leaves ``(1 + e^{-ch}) (q2 - q1)
    = (e^{ch} + 1) (q1 - q0) - 2 h^2 grad V(q1)``, so none of the constants
    depend on ``k``.
    """
    r = np.exp(-damping * h)
    with np.errstate(over="ignore"):
        kappa_bar = 2 * h * h / (1 + np.exp(damping * h))
    return StepCoefficients(kappa=r, kappa_hat=1 + r, kappa_bar=kappa_bar)


def explicit_step(model, k: int, h: float, q0, q1) -> np.ndarray:
    """Solve the discrete Euler-Lagrange equation at step ``k`` for ``q2``."""
    _check_step(h)
    q0, q1 = _vec(q0, "q0"), _vec(q1, "q1")
    co = step_coefficients(model.damping, h)
    # increment form, algebraically kappa_hat*q1 - kappa*q0 - ...; keeps small
    # increments accurate when |q| >> |q1 - q0|
    return q1 + (co.kappa * (q1 - q0) - co.kappa_bar * np.asarray(model.potential_gradient(q1)))


def discrete_flow(model, k: int, h: float, q0, q1) -> tuple[np.ndarray, np.ndarray]:
    """``Psi_d^{k,k+1}: (q_k, q_{k+1}) -> (q_{k+1}, q_{k+2})``."""
    return np.asarray(q1), explicit_step(model, k, h, q0, q1)


def _initial_increment(model, config: IntegratorConfig, dtype) -> np.ndarray:
    h = dtype(config.step)
    q0 = config.initial_position.astype(dtype)
    v0 = config.initial_velocity.astype(dtype)
    if config.start == "forward":
        return h * v0
    # p_0 = exp(c*0) v(0) = v(0); invert p_0 = -D1 L_d^0(q0, q1)
    a0, a1 = weight(model, 0, h), weight(model, 1, h)
    g0 = np.asarray(model.potential_gradient(q0), dtype=dtype)
    return 2 * h / (a0 + a1) * (v0 - 0.5 * h * a0 * g0)


def _run(model, config: IntegratorConfig, overflow_guard: float, dtype):
    """Core loop. Returns arrays of q, increments, gradients, potentials and status."""
    h = dtype(config.step)
    n = config.steps
    co = step_coefficients(dtype(model.damping), h)
    kappa, kappa_bar = dtype(co.kappa), dtype(co.kappa_bar)
    grad, pot = model.potential_gradient, model.potential

    q = np.empty((n + 2, model.dim), dtype=dtype)
    g = np.empty((n + 2, model.dim), dtype=dtype)
    v = np.empty(n + 2, dtype=dtype)
    q[0] = config.initial_position.astype(dtype)
    g[0] = grad(q[0])
    v[0] = pot(q[0])
    dq = _initial_increment(model, config, dtype)
    incs = np.empty((n + 1, model.dim), dtype=dtype)
    status, diverged_at = "ok", None
    last = n
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n + 1):
            q[k + 1] = q[k] + dq
            incs[k] = dq
            if not (np.all(np.isfinite(q[k + 1])) and np.max(np.abs(q[k + 1])) <= overflow_guard):
                if k + 1 <= n:
                    status, diverged_at = "diverged", k + 1
                    # point k needs q_{k+1} for its velocity and is dropped too
                    last = k - 1
                break
            g[k + 1] = grad(q[k + 1])
            v[k + 1] = pot(q[k + 1])
            if k < n:
                dq = kappa * dq - kappa_bar * g[k + 1]
    m = last + 1
    return q[: m + 1], incs[:m], g[: m + 1], v[: m + 1], status, diverged_at


def integrate(
    model: DampedLagrangianModel,
    config: IntegratorConfig,
    generators: Sequence[NoetherGenerator] = (),
    overflow_guard: float = DEFAULT_OVERFLOW_GUARD,
    dtype=np.float64,
) -> Trajectory:
    """Run the explicit scheme and fill per-step diagnostics.

    On blow-up (a coordinate beyond ``overflow_guard`` or non-finite) the run
    stops and only the finite prefix is returned, with ``status="diverged"``.
    """
    if config.initial_position.size != model.dim:
        raise ValueError(
            f"initial conditions have length {config.initial_position.size}, model dim is {model.dim}"
        )
    qx, dq, g, v, status, diverged_at = _run(model, config, overflow_guard, dtype)
    h = dtype(config.step)
    m = dq.shape[0]
    q = qx[:m]
    k = np.arange(m + 1, dtype=dtype)
    a = np.exp(dtype(model.damping) * (k * h))
    s = (a[:-1] + a[1:])[:, None]
    # p_k^- and the matching D1 L_d^k
    d1 = -s / (2 * h) * dq - 0.5 * h * a[:-1, None] * g[:m]
    momentum = -d1
    sq = np.einsum("ij,ij->i", dq, dq)
    energy = (a[:-1] + a[1:]) * sq / (4 * h) + 0.5 * h * (a[:-1] * v[:m] + a[1:] * v[1 : m + 1])
    auto = 0.5 * sq / h**2 + 0.5 * (v[:m] + v[1 : m + 1])
    charges = np.empty((m, len(generators)), dtype=dtype)
    for j, gen in enumerate(generators):
        charges[:, j] = np.einsum("ij,ij->i", d1, gen(q))
    if m >= 2:
        d2 = s[:-1] / (2 * h) * dq[:-1] - 0.5 * h * a[1:m, None] * g[1:m]
        res = np.linalg.norm(d1[1:] + d2, axis=1)
    else:
        res = np.empty(0, dtype=dtype)
    return Trajectory(
        step=config.step,
        damping=model.damping,
        q=q,
        velocity=dq / h,
        momentum=momentum,
        energy=energy,
        autonomous_energy=auto,
        charges=charges,
        del_residual=res,
        generator_names=tuple(gen.name for gen in generators),
        status=status,
        diverged_at=diverged_at,
    )


# ---------------------------------------------------------------------------
# Legendre transforms and the phase-space map


def legendre_plus(model, k, h, q0, q1) -> tuple[np.ndarray, np.ndarray]:
    """``F+(q0, q1) = (q1, D2 L_d^k(q0, q1))``."""
    return _vec(q1, "q1"), d2_discrete_lagrangian(model, k, h, q0, q1)


def legendre_minus(model, k, h, q0, q1) -> tuple[np.ndarray, np.ndarray]:
    """``F-(q0, q1) = (q0, -D1 L_d^k(q0, q1))``."""
    return _vec(q0, "q0"), -d1_discrete_lagrangian(model, k, h, q0, q1)


def inverse_legendre_minus(model, k, h, q, p) -> tuple[np.ndarray, np.ndarray]:
    """Pair ``(q0, q1)`` with ``F-_{L_d^k}(q0, q1) = (q, p)``; closed form."""
    _check_step(h)
    q, p = _vec(q, "q"), _vec(p, "p")
    a0, a1 = weight(model, k, h), weight(model, k + 1, h)
    g = np.asarray(model.potential_gradient(q))
    return q, q + 2 * h / (a0 + a1) * (p - 0.5 * h * a0 * g)


def inverse_legendre_plus(model, k, h, q, p) -> tuple[np.ndarray, np.ndarray]:
    """Pair ``(q0, q1)`` with ``F+_{L_d^k}(q0, q1) = (q, p)``; closed form."""
    _check_step(h)
    q, p = _vec(q, "q"), _vec(p, "p")
    a0, a1 = weight(model, k, h), weight(model, k + 1, h)
    g = np.asarray(model.potential_gradient(q))
    return q - 2 * h / (a0 + a1) * (p + 0.5 * h * a1 * g), q


def hamiltonian_step(model, k, h, q, p) -> tuple[np.ndarray, np.ndarray]:
    """``F+_{L_d^k} o (F-_{L_d^k})^{-1}``: ``(q_k, p_k) -> (q_{k+1}, p_{k+1})``."""
    q0, q1 = inverse_legendre_minus(model, k, h, q, p)
    return legendre_plus(model, k, h, q0, q1)


def hamiltonian_step_via_minus(model, k, h, q, p) -> tuple[np.ndarray, np.ndarray]:
    """``F-_{L_d^{k+1}} o Psi_d^{k,k+1} o (F-_{L_d^k})^{-1}``."""
    q0, q1 = inverse_legendre_minus(model, k, h, q, p)
    q1, q2 = discrete_flow(model, k, h, q0, q1)
    return legendre_minus(model, k + 1, h, q1, q2)


def hamiltonian_step_via_plus(model, k, h, q, p) -> tuple[np.ndarray, np.ndarray]:
    """``F+_{L_d^k} o Psi_d^{k-1,k} o (F+_{L_d^{k-1}})^{-1}``."""
    qm, q0 = inverse_legendre_plus(model, k - 1, h, q, p)
    q0, q1 = discrete_flow(model, k - 1, h, qm, q0)
    return legendre_plus(model, k, h, q0, q1)


def symplecticity_defect(
    model,
    k: int,
    h: float,
    q,
    p,
    fd_step: float = 1e-5,
    step_map: Optional[Callable] = None,
) -> float:
    """``max |D^T J D - J|`` for the central-difference Jacobian ``D`` of a phase map.

    ``step_map(q, p) -> (q', p')`` defaults to :func:`hamiltonian_step` at ``k``.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    if step_map is None:
        def step_map(qq, pp):
            return hamiltonian_step(model, k, h, qq, pp)
    x = np.concatenate([_vec(q, "q"), _vec(p, "p")])
    n = x.size // 2

    def f(y):
        a, b = step_map(y[:n], y[n:])
        return np.concatenate([a, b])

    jac = np.empty((2 * n, 2 * n))
    for i in range(2 * n):
        e = np.zeros(2 * n)
        e[i] = fd_step
        jac[:, i] = (f(x + e) - f(x - e)) / (2 * fd_step)
    omega = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    return float(np.max(np.abs(jac.T @ omega @ jac - omega)))


# ---------------------------------------------------------------------------
# Noether charges and energies


def noether_charge(model, gen: NoetherGenerator, k, h, q0, q1) -> float:
    """Vertical-lift pairing ``<D1 L_d^k(q0, q1), xi_Q(q0)>``."""
    q0 = _vec(q0, "q0")
    return float(np.dot(d1_discrete_lagrangian(model, k, h, q0, q1), gen(q0)))


def scaled_momentum_ratio(model, gen: NoetherGenerator, trajectory: Trajectory) -> np.ndarray:
    """Ratios ``m_{k+1} / m_k`` of the unweighted momentum ``<(q_{k+1}-q_k)/h, xi(q_k)>``.

    For ``V = 0`` each ratio is ``exp(-c h)``.
    """
    m = np.einsum("ij,ij->i", trajectory.velocity, gen(trajectory.q))
    with np.errstate(divide="ignore", invalid="ignore"):
        return m[1:] / m[:-1]


def noether_drift(trajectory: Trajectory, generators: Sequence[NoetherGenerator]) -> np.ndarray:
    """Relative drift ``max_k |J_k - J_0| / max_k |p_k| |xi(q_k)|`` per generator.

    The denominator bounds ``|J_k|`` by Cauchy-Schwarz, so the ratio stays
    meaningful when a charge is zero (e.g. a formation started at rest).
    """
    out = np.empty(len(generators))
    for j, gen in enumerate(generators):
        charge = trajectory.charges[:, j]
        scale = np.max(np.linalg.norm(trajectory.momentum, axis=1) * np.linalg.norm(gen(trajectory.q), axis=1))
        out[j] = np.max(np.abs(charge - charge[0])) / scale if scale > 0 else 0.0
    return out


def discrete_energy(model, k, h, q0, q1) -> float:
    """Trapezoidal rule for ``E_L`` over one step, with the weights of ``L_d^k``."""
    _check_step(h)
    q0, q1 = _vec(q0, "q0"), _vec(q1, "q1")
    a0, a1 = weight(model, k, h), weight(model, k + 1, h)
    dq = q1 - q0
    return (a0 + a1) * np.dot(dq, dq) / (4 * h) + 0.5 * h * (
        a0 * model.potential(q0) + a1 * model.potential(q1)
    )


def autonomous_discrete_energy(model, h, q0, q1) -> float:
    """Unweighted energy ``0.5 |(q1-q0)/h|^2 + (V(q0) + V(q1)) / 2``."""
    _check_step(h)
    q0, q1 = _vec(q0, "q0"), _vec(q1, "q1")
    v = (q1 - q0) / h
    return 0.5 * np.dot(v, v) + 0.5 * (model.potential(q0) + model.potential(q1))


# ---------------------------------------------------------------------------
# extended phase space


def extended_lagrangian(model, q0, q1, t0, t1) -> float:
    """Trapezoidal discrete Lagrangian with free endpoint times."""
    q0, q1 = np.asarray(q0), np.asarray(q1)
    tau = t1 - t0
    dq = q1 - q0
    e0, e1 = np.exp(model.damping * t0), np.exp(model.damping * t1)
    return (e0 + e1) * np.dot(dq, dq) / (4 * tau) - 0.5 * tau * (
        e0 * model.potential(q0) + e1 * model.potential(q1)
    )


def extended_lagrangian_time_partials(model, q0, q1, t0, t1) -> tuple[float, float]:
    """Analytic ``(dL/dt0, dL/dt1)`` of :func:`extended_lagrangian`."""
    q0, q1 = np.asarray(q0), np.asarray(q1)
    c = model.damping
    tau = t1 - t0
    dq = q1 - q0
    sq = np.dot(dq, dq)
    e0, e1 = np.exp(c * t0), np.exp(c * t1)
    w0, w1 = e0 * model.potential(q0), e1 * model.potential(q1)
    kin = sq / (4 * tau * tau) * (e0 + e1)
    d_t0 = kin + c * e0 * sq / (4 * tau) + 0.5 * (w0 + w1) - 0.5 * tau * c * w0
    d_t1 = -kin + c * e1 * sq / (4 * tau) - 0.5 * (w0 + w1) - 0.5 * tau * c * w1
    return d_t0, d_t1


def extended_energy_drift(
    model: DampedLagrangianModel,
    config: IntegratorConfig,
    generators: Sequence[NoetherGenerator] = (),
    dtype=np.longdouble,
    return_trajectory: bool = False,
):
    """``H_ext(t_k, q_k, mu_k, p_k) - H_ext(t_0, ...)`` along a discrete solution.

    ``mu`` is advanced by ``mu_{k+1} = mu_k + dL/dt0 + dL/dt1`` (the multiplier
    of the time constraint eliminated) from ``mu_0 = -H(0, q_0, p_0)``.
    ``generators`` is accepted for signature symmetry and ignored.

    Runs in extended precision by default: on long damped runs the weights
    ``exp(c t)`` overflow doubles even though ``H_ext`` itself stays O(1).
    """
    del generators
    qx, dq, g, v, status, diverged_at = _run(model, config, DEFAULT_OVERFLOW_GUARD, dtype)
    if status != "ok":
        raise FloatingPointError(f"trajectory diverged at step {diverged_at}")
    h = dtype(config.step)
    c = dtype(model.damping)
    m = dq.shape[0]
    k = np.arange(m + 1, dtype=dtype)
    t = k * h
    a = np.exp(c * t)
    p = (a[:-1] + a[1:])[:, None] / (2 * h) * dq + 0.5 * h * a[:-1, None] * g[:m]
    ham = 0.5 * np.exp(-c * t[:m]) * np.einsum("ij,ij->i", p, p) + a[:m] * v[:m]
    sq = np.einsum("ij,ij->i", dq, dq)
    tau = t[1:] - t[:-1]
    w0, w1 = a[:-1] * v[:m], a[1:] * v[1 : m + 1]
    kin = sq / (4 * tau * tau) * (a[:-1] + a[1:])
    d_t0 = kin + c * a[:-1] * sq / (4 * tau) + 0.5 * (w0 + w1) - 0.5 * tau * c * w0
    d_t1 = -kin + c * a[1:] * sq / (4 * tau) - 0.5 * (w0 + w1) - 0.5 * tau * c * w1
    mu = np.empty(m, dtype=dtype)
    mu[0] = -ham[0]
    mu[1:] = mu[0] + np.cumsum((d_t0 + d_t1)[:-1])
    drift = mu + ham
    if return_trajectory:
        return drift, (qx[:m], p, mu)
    return drift


# ---------------------------------------------------------------------------
# explicit Euler baseline


def euler_reference_step(model, h, q, v) -> tuple[np.ndarray, np.ndarray]:
    """One explicit Euler step of ``qdot = v, vdot = -c v - grad V(q)``."""
    _check_step(h)
    q, v = np.asarray(q), np.asarray(v)
    acc = -model.damping * v - np.asarray(model.potential_gradient(q))
    return q + h * v, v + h * acc


@dataclass
class EulerTrajectory:
    step: float
    q: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    status: str = "ok"
    diverged_at: Optional[int] = None

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.q.shape[0]) * self.step

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


def euler_integrate(
    model, config: IntegratorConfig, overflow_guard: float = DEFAULT_OVERFLOW_GUARD
) -> EulerTrajectory:
    """Explicit Euler run with the same guard semantics as :func:`integrate`.

    ``energy`` is the unweighted ``0.5 |v|^2 + V(q)``.
    """
    h = config.step
    n = config.steps
    q = np.empty((n + 1, model.dim))
    v = np.empty((n + 1, model.dim))
    q[0], v[0] = config.initial_position, config.initial_velocity
    status, diverged_at, m = "ok", None, n + 1
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            qn, vn = euler_reference_step(model, h, q[k], v[k])
            if not (np.all(np.isfinite(qn)) and np.all(np.isfinite(vn))
                    and np.max(np.abs(qn)) <= overflow_guard):
                status, diverged_at, m = "diverged", k + 1, k + 1
                break
            q[k + 1], v[k + 1] = qn, vn
    q, v = q[:m], v[:m]
    energy = 0.5 * np.einsum("ij,ij->i", v, v) + np.array([model.potential(x) for x in q])
    return EulerTrajectory(h, q, v, energy, status, diverged_at)


def invariance_probe(
    model, gen: NoetherGenerator, samples: int = 16, seed: int = 0, scale: float = 1.0
) -> float:
    """``max |V(exp(eps xi) q) - V(q)| / eps`` over random ``q`` with ``eps = 1e-5``."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    eps = 1e-5
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        q = scale * rng.standard_normal(model.dim)
        worst = max(worst, abs(model.potential(gen.act(q, eps)) - model.potential(q)) / eps)
    return float(worst)
