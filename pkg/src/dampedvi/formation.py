"""Distance-based formation stabilization for double-integrator agents.

Configurations are stacked vectors ``q = (q_1, ..., q_n)`` with ``q_i`` in
``R^d``. Every function taking ``q`` also accepts a batch with extra leading
axes, which is what the sweep campaign relies on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import DampedLagrangianModel

__all__ = [
    "GraphTopology",
    "FormationShape",
    "complete_graph",
    "incidence_matrix",
    "relative_positions",
    "distance_errors",
    "rigidity_matrix",
    "rigidity_rank",
    "is_infinitesimally_rigid",
    "formation_potential",
    "formation_gradient",
    "formation_model",
    "closed_loop_rhs",
    "agent_energies",
    "pairwise_distances",
    "congruence_discrepancy",
    "max_agent_speed",
    "congruence_check",
    "alpha_bound",
    "step_size_bound_alpha",
    "regular_tetrahedron",
    "square_with_diagonals",
    "planar_square_shape",
    "SQUARE_DEMO_START",
]

# stacked initial positions of the four-agent run
SQUARE_DEMO_START = np.array([1, 0, 0, 1, 0, 1, 0, -3, 0, 1, 0, -3], dtype=float)


@dataclass(frozen=True)
class GraphTopology:
    node_count: int
    edges: tuple

    def __post_init__(self):
        if self.node_count < 2:
            raise ValueError("a formation needs at least two nodes")
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        seen = set()
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise ValueError(f"edge ({i}, {j}) out of range for {self.node_count} nodes")
            key = frozenset((i, j))
            if key in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add(key)
        object.__setattr__(self, "edges", edges)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def tails(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges], dtype=int)

    @property
    def heads(self) -> np.ndarray:
        return np.array([e[1] for e in self.edges], dtype=int)

    @cached_property
    def incidence(self) -> np.ndarray:
        return incidence_matrix(self)

    def neighbors(self, i: int) -> list[int]:
        return [b if a == i else a for a, b in self.edges if i in (a, b)]


def complete_graph(n: int) -> GraphTopology:
    return GraphTopology(n, tuple(itertools.combinations(range(n), 2)))


@dataclass(frozen=True)
class FormationShape:
    topology: GraphTopology
    ambient_dim: int
    desired_lengths: tuple

    def __post_init__(self):
        if self.ambient_dim not in (2, 3):
            raise ValueError("ambient_dim must be 2 or 3")
        lengths = tuple(float(x) for x in self.desired_lengths)
        if len(lengths) != self.topology.edge_count:
            raise ValueError(
                f"{len(lengths)} desired lengths for {self.topology.edge_count} edges"
            )
        if any(not (x > 0 and np.isfinite(x)) for x in lengths):
            raise ValueError("desired lengths must be positive and finite")
        object.__setattr__(self, "desired_lengths", lengths)

    @property
    def n(self) -> int:
        return self.topology.node_count

    @property
    def dim(self) -> int:
        return self.n * self.ambient_dim

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.desired_lengths)

    @classmethod
    def from_configuration(cls, topology: GraphTopology, q, ambient_dim: int) -> "FormationShape":
        """Shape whose desired lengths are the edge lengths realized by ``q``."""
        pts = np.asarray(q, dtype=float).reshape(topology.node_count, ambient_dim)
        lengths = [np.linalg.norm(pts[i] - pts[j]) for i, j in topology.edges]
        return cls(topology, ambient_dim, tuple(lengths))


def _blocks(shape: FormationShape, q) -> np.ndarray:
    q = np.asarray(q)
    if q.shape[-1] != shape.dim:
        raise ValueError(f"configuration has length {q.shape[-1]}, expected {shape.dim}")
    return q.reshape(q.shape[:-1] + (shape.n, shape.ambient_dim))


def incidence_matrix(topology: GraphTopology) -> np.ndarray:
    """``B[i, w] = +1`` at the tail of edge ``w``, ``-1`` at its head."""
    b = np.zeros((topology.node_count, topology.edge_count))
    for w, (i, j) in enumerate(topology.edges):
        b[i, w] = 1.0
        b[j, w] = -1.0
    return b


def _edge_vectors(shape: FormationShape, q) -> np.ndarray:
    pts = _blocks(shape, q)
    topo = shape.topology
    return pts[..., topo.tails, :] - pts[..., topo.heads, :]


def relative_positions(shape: FormationShape, q) -> np.ndarray:
    """Stacked ``z = (B kron I_d)^T q``; block ``w`` is ``q_tail - q_head``."""
    z = _edge_vectors(shape, q)
    return z.reshape(z.shape[:-2] + (-1,))


def distance_errors(shape: FormationShape, q) -> np.ndarray:
    """``e_w = |q_i - q_j|^2 - d_w^2``."""
    z = _edge_vectors(shape, q)
    return np.einsum("...i,...i->...", z, z) - shape.lengths**2


def rigidity_matrix(shape: FormationShape, q) -> np.ndarray:
    """``R(z) = D(z)^T (B kron I_d)``, half the Jacobian of the squared-length map."""
    z = _edge_vectors(shape, q)
    if z.ndim != 2:
        raise ValueError("rigidity_matrix takes a single configuration")
    topo = shape.topology
    d = shape.ambient_dim
    r = np.zeros((topo.edge_count, shape.dim))
    for w, (i, j) in enumerate(topo.edges):
        r[w, i * d : (i + 1) * d] = z[w]
        r[w, j * d : (j + 1) * d] = -z[w]
    return r


def rigidity_rank(shape: FormationShape, q, rtol: float = 1e-9) -> int:
    """Numerical rank: singular values above ``rtol`` times the largest."""
    sv = np.linalg.svd(rigidity_matrix(shape, q), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def is_infinitesimally_rigid(shape: FormationShape, q, rtol: float = 1e-9) -> tuple[bool, int, int]:
    """``(rigid, rank, required)`` with ``required = 2n-3`` (plane) or ``3n-6`` (space)."""
    n = shape.n
    required = 2 * n - 3 if shape.ambient_dim == 2 else 3 * n - 6
    rank = rigidity_rank(shape, q, rtol)
    return rank == required, rank, required


def formation_potential(shape: FormationShape, q):
    """``sum_w 0.25 * (|z_w|^2 - d_w^2)^2``."""
    e = distance_errors(shape, q)
    return 0.25 * np.sum(e * e, axis=-1)


def formation_gradient(shape: FormationShape, q) -> np.ndarray:
    """``R(z)^T e(z)`` via the incidence matrix; batches broadcast."""
    pts = _blocks(shape, q)
    topo = shape.topology
    z = pts[..., topo.tails, :] - pts[..., topo.heads, :]
    e = np.einsum("...i,...i->...", z, z) - shape.lengths**2
    g = topo.incidence @ (e[..., None] * z)
    return g.reshape(np.shape(q))


def formation_model(shape: FormationShape, kappa) -> DampedLagrangianModel:
    """Variational model ``L = exp(kappa t) (0.5 |qdot|^2 - V)`` for a uniform gain.

    Per-agent gains cannot be folded into a single exponential weight, so a
    non-uniform gain vector is rejected.
    """
    gains = np.atleast_1d(np.asarray(kappa, dtype=float))
    if not np.allclose(gains, gains[0], rtol=0, atol=0):
        raise ValueError(
            "the variational model needs a uniform damping gain; "
            f"got per-agent gains {gains.tolist()}"
        )
    return DampedLagrangianModel(
        dim=shape.dim,
        damping=float(gains[0]),
        potential=lambda q: formation_potential(shape, q),
        potential_gradient=lambda q: formation_gradient(shape, q),
        name="formation",
    )


def closed_loop_rhs(shape: FormationShape, gains, q, v) -> tuple[np.ndarray, np.ndarray]:
    """``(qdot, vdot) = (v, -K v - grad V(q))`` with ``K = diag(gains) kron I_d``."""
    gains = np.asarray(gains, dtype=float)
    if np.any(gains <= 0):
        raise ValueError("damping gains must be positive")
    v = np.asarray(v)
    k = np.broadcast_to(gains, (shape.n,))
    kv = (_blocks(shape, v) * k[:, None]).reshape(v.shape)
    return v, -kv - formation_gradient(shape, q)


def agent_energies(shape: FormationShape, h: float, q0, q1) -> np.ndarray:
    """Per-agent discrete energy over one step.

    ``E_i = |q1_i - q0_i|^2 / (2 h^2) + 0.25 * sum_{j in N_i} (V_ij(q0) + V_ij(q1))``;
    the entries sum to ``0.5 |dq/h|^2 + (V(q0) + V(q1)) / 2``.
    """
    dq = _blocks(shape, np.asarray(q1) - np.asarray(q0))
    kin = np.einsum("...i,...i->...", dq, dq) / (2 * h * h)
    e0, e1 = distance_errors(shape, q0), distance_errors(shape, q1)
    vw = 0.25 * (e0 * e0 + e1 * e1)
    pot = 0.25 * (vw @ np.abs(shape.topology.incidence).T)
    return kin + pot


def pairwise_distances(q, ambient_dim: int) -> np.ndarray:
    """All ``|q_i - q_j|`` for ``i < j`` in ``itertools.combinations`` order."""
    q = np.asarray(q)
    pts = q.reshape(q.shape[:-1] + (-1, ambient_dim))
    i, j = np.triu_indices(pts.shape[-2], 1)
    diff = pts[..., i, :] - pts[..., j, :]
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


def congruence_discrepancy(reference, q, ambient_dim: int) -> np.ndarray:
    """Largest relative mismatch over all agent pairs."""
    ref = pairwise_distances(reference, ambient_dim)
    return np.max(np.abs(pairwise_distances(q, ambient_dim) - ref) / ref, axis=-1)


def max_agent_speed(v, ambient_dim: int) -> np.ndarray:
    v = np.asarray(v)
    blocks = v.reshape(v.shape[:-1] + (-1, ambient_dim))
    return np.max(np.sqrt(np.einsum("...i,...i->...", blocks, blocks)), axis=-1)


def congruence_check(
    reference,
    q_final,
    v_final,
    ambient_dim: int,
    dist_tol_rel: float = 0.01,
    vel_tol: float = 0.1,
):
    """Congruent to ``reference`` (every pair, not just edges) and at rest.

    Returns a boolean, or a boolean array for batched ``q_final``.
    """
    if dist_tol_rel <= 0 or vel_tol <= 0:
        raise ValueError("tolerances must be positive")
    ok = (congruence_discrepancy(reference, q_final, ambient_dim) < dist_tol_rel) & (
        max_agent_speed(v_final, ambient_dim) < vel_tol
    )
    return bool(ok) if np.ndim(ok) == 0 else ok


def alpha_bound(
    node_count: int,
    edge_count: int,
    max_length: float,
    kappa: float,
    c_ball: float = 1.0,
    R_ball: float = 1.0,
) -> float:
    """Step-size bound ``alpha = R / (c M)``.

    ``M^2`` is the larger of the two branch bounds on ``|f(q, p)|^2``,
    ``(1 + 2|V| kappa^2) c^2 + 64 |E| R^6`` when edges are stretched and
    ``(1 + 2|V| kappa^2) c^2 + 64 |E| R^2 max d^4`` when they are compressed.
    """
    if min(c_ball, R_ball) <= 0 or kappa < 0 or max_length < 0:
        raise ValueError("alpha_bound needs positive c, R and non-negative kappa, lengths")
    base = (1 + 2 * node_count * kappa**2) * c_ball**2
    stretched = base + 64 * edge_count * R_ball**6
    compressed = base + 64 * edge_count * R_ball**2 * max_length**4
    m = np.sqrt(max(stretched, compressed))
    return float(R_ball / (c_ball * m))


def step_size_bound_alpha(
    shape: FormationShape, kappa: float, c_ball: float = 1.0, R_ball: float = 1.0
) -> float:
    return alpha_bound(
        shape.n, shape.topology.edge_count, max(shape.desired_lengths), kappa, c_ball, R_ball
    )


# ---------------------------------------------------------------------------
# stock shapes


def regular_tetrahedron(edge: float = 1.0) -> tuple[FormationShape, np.ndarray]:
    """Complete graph on four agents at a regular tetrahedron centred at the origin."""
    pts = edge / np.sqrt(8) * np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
    )
    q = pts.ravel()
    return FormationShape.from_configuration(complete_graph(4), q, 3), q


def square_with_diagonals(side: float = 1.0, ambient_dim: int = 2) -> tuple[FormationShape, np.ndarray]:
    """Complete graph on a square ``0-1-2-3`` (sides ``side``, diagonals ``side*sqrt(2)``)."""
    pts = side * np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    if ambient_dim == 3:
        pts = np.hstack([pts, np.zeros((4, 1))])
    q = pts.ravel()
    return FormationShape.from_configuration(complete_graph(4), q, ambient_dim), q


def planar_square_shape(side: float = 5.0) -> tuple[FormationShape, np.ndarray]:
    """Four agents in ``R^3`` with a complete graph and a square target.

    The stock initial positions are coplanar (agents 0, 1 and 3 sit on one
    line), and that plane is invariant under the closed loop, so the target is
    a planar square rather than a solid.
    """
    return square_with_diagonals(side, ambient_dim=3)
