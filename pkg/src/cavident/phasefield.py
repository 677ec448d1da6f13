"""Phase-field representation of cavities and its gradient-flow update.

The cavity indicator v lives in [0, 1] nodally, with v = 0 pinned in a
band along the outer boundary. One reconstruction step solves a
box-constrained quadratic program: an implicit step of the regularized
objective's gradient flow, linearized around the current iterate. The QP
is solved by a primal-dual active set method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import assemble_scalar_mass, assemble_scalar_stiffness, strain_displacement_matrices

logger = logging.getLogger(__name__)


class PDASError(Exception):
    """Raised when the active-set solver fails to reach a feasible point."""


def boundary_band_mask(mesh, d_band=0.1):
    """Vertices within distance d_band of the outer square boundary."""
    reach = np.max(np.abs(mesh.vertices), axis=1)
    return (1.0 - reach) <= d_band + 1e-12


@dataclass(frozen=True)
class PhaseField:
    """Nodal cavity fraction in [0, 1], zero on the boundary band."""

    mesh: object
    values: np.ndarray
    frozen: np.ndarray  # bool mask of pinned (v = 0) vertices

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float)
        frozen = np.ascontiguousarray(self.frozen, dtype=bool)
        if values.shape != (self.mesh.n_vertices,):
            raise ValueError("phase field length does not match the mesh")
        if frozen.shape != values.shape:
            raise ValueError("frozen mask length does not match the mesh")
        if np.any(values < -1e-12) or np.any(values > 1.0 + 1e-12):
            raise ValueError("phase field leaves [0, 1]")
        if np.any(values[frozen] != 0.0):
            raise ValueError("phase field is nonzero on a pinned vertex")
        values.setflags(write=False)
        frozen.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "frozen", frozen)

    @classmethod
    def zeros(cls, mesh, d_band=0.1):
        return cls(mesh, np.zeros(mesh.n_vertices), boundary_band_mask(mesh, d_band))


@dataclass(frozen=True)
class StepMatrices:
    """Mass and stiffness reused across steps on a fixed mesh."""

    mass: sp.csr_matrix
    stiffness: sp.csr_matrix

    @classmethod
    def build(cls, mesh):
        return cls(assemble_scalar_mass(mesh), assemble_scalar_stiffness(mesh))


def ginzburg_landau_energy(v, matrices, alpha_tilde, epsilon):
    """Regularization term: alpha~ * int(eps |grad v|^2 + v(1-v)/eps).

    Exact for nodal v: the double-well part expands to 1'Mv - v'Mv since
    v(1-v) is quadratic on each triangle.
    """
    vals = v.values if isinstance(v, PhaseField) else np.asarray(v, dtype=float)
    grad = vals @ (matrices.stiffness @ vals)
    ones = np.ones_like(vals)
    well = ones @ (matrices.mass @ vals) - vals @ (matrices.mass @ vals)
    return alpha_tilde * (epsilon * grad + well / epsilon)


def assemble_gradient_density(mesh, params, pairs):
    """Nodal misfit-gradient vector G, (nv,).

    pairs is a sequence of (u, p) forward/adjoint fields; the density
    (1 - delta) * C0 strain(u) : strain(p) is piecewise constant, and each
    triangle scatters a third of its integral to each vertex (the exact
    integral against the nodal hats). Averaged over the load cases.
    """
    D = params.voigt_matrix()
    G = np.zeros(mesh.n_vertices)
    weight = mesh.areas / 3.0
    for u, p in pairs:
        eu = u.strains()
        ep = p.strains()
        density = np.einsum("ti,ij,tj->t", eu, D, ep)
        contrib = (1.0 - params.delta) * density * weight
        np.add.at(G, mesh.triangles[:, 0], contrib)
        np.add.at(G, mesh.triangles[:, 1], contrib)
        np.add.at(G, mesh.triangles[:, 2], contrib)
    return G / len(pairs)


@dataclass(frozen=True)
class ObstacleProblem:
    """Box-constrained QP: minimize (1/2) w'Aw - b'w over 0 <= w <= 1.

    Fixed (pinned) vertices are eliminated; indices in `free` map the
    reduced unknowns back to mesh vertices.
    """

    A: sp.csc_matrix
    b: np.ndarray
    free: np.ndarray
    n_vertices: int

    @cached_property
    def _diag(self):
        return self.A.diagonal()

    def expand(self, w):
        full = np.zeros(self.n_vertices)
        full[self.free] = w
        return full

    def residual(self, w):
        return self.A @ w - self.b

    def slack(self, w, omega):
        """Variational-inequality slack (Aw - b) . (omega - w); nonnegative
        at the solution for any feasible omega."""
        return float(self.residual(w) @ (omega - w))


def build_step_problem(v_n, gradient, matrices, *, tau, alpha_tilde, epsilon):
    """QP for one implicit gradient-flow step from v_n.

    The step minimizes (1/(2 tau)) |w - v_n|_M^2 + gradient'(w - v_n)
    + alpha~ (eps w'Ks w + (1 - 2 v_n)'M w / eps) over the box.
    """
    M = matrices.mass
    Ks = matrices.stiffness
    vals = v_n.values
    A_full = (M / tau + 2.0 * alpha_tilde * epsilon * Ks).tocsr()
    b_full = M @ vals / tau - gradient - (alpha_tilde / epsilon) * (M @ (1.0 - 2.0 * vals))
    free = np.flatnonzero(~v_n.frozen)
    A = A_full[free][:, free].tocsc()
    b = b_full[free] - A_full[free][:, v_n.frozen] @ vals[v_n.frozen]
    return ObstacleProblem(A, b, free, v_n.mesh.n_vertices)


@dataclass(frozen=True)
class PDASState:
    """Outcome of an active-set solve."""

    solution: np.ndarray  # reduced (len(free),) in [0, 1]
    lower: np.ndarray  # bool, w = 0 active
    upper: np.ndarray  # bool, w = 1 active
    iterations: int
    multiplier: np.ndarray  # b - Aw; <= 0 on lower-active, >= 0 on upper-active

    @property
    def active_sets(self):
        return self.lower, self.upper


def _reduced_solve(A, b, lower, upper):
    """Solve Aw = b with w pinned to 0 on lower and 1 on upper."""
    n = len(b)
    w = np.zeros(n)
    w[upper] = 1.0
    idx = np.flatnonzero(~(lower | upper))
    if len(idx):
        rhs = b[idx] - A[idx][:, upper] @ w[upper] if upper.any() else b[idx]
        try:
            w[idx] = splu(A[idx][:, idx].tocsc()).solve(rhs)
        except RuntimeError as exc:
            raise PDASError("reduced system is singular: %s" % exc) from exc
        if not np.isfinite(w[idx]).all():
            raise PDASError("reduced solve produced non-finite values")
    return w


def _projected_gauss_seidel(A, b, w0, max_sweeps=500):
    """Identify the optimal active sets by projected Gauss-Seidel sweeps.

    Globally convergent for symmetric positive definite A, so this settles
    the rare problems where the plain active-set iteration cycles.
    """
    A = A.tocsr()
    diag = A.diagonal()
    indptr, indices, data = A.indptr, A.indices, A.data
    w = np.clip(w0, 0.0, 1.0)
    previous = None
    stable = 0
    for sweep in range(1, max_sweeps + 1):
        for i in range(len(w)):
            row = slice(indptr[i], indptr[i + 1])
            wi = w[i] + (b[i] - data[row] @ w[indices[row]]) / diag[i]
            w[i] = 0.0 if wi < 0.0 else (1.0 if wi > 1.0 else wi)
        r = A @ w - b
        lower = r - w > 0.0
        upper = -r + (w - 1.0) > 0.0
        signature = (lower.tobytes(), upper.tobytes())
        if signature == previous:
            stable += 1
            if stable >= 3:
                return lower, upper, sweep
        else:
            stable = 0
            previous = signature
    return lower, upper, max_sweeps


def pdas_solve(problem, warm_start=None, max_iter=50, c=1.0):
    """Primal-dual active set solve of the box QP.

    Iterates: fix w = 0 on the lower set and w = 1 on the upper set, solve
    the reduced system on the inactive set, then re-estimate both sets from
    the residual r = Aw - b (the negative multiplier). With c > 0 the two
    predicates r - c w > 0 and -r + c (w - 1) > 0 are exclusive, so the
    sets stay disjoint. A repeat of the sets is a fixed point, which
    satisfies the KKT conditions exactly.

    The plain iteration can cycle when A is not an M-matrix (the step
    matrices here are not: the mass part has positive off-diagonal
    entries). A detected cycle restarts the iteration with a ten-fold
    larger c; if escalation fails too, projected Gauss-Seidel locates the
    active sets and one reduced solve finishes. Every return path yields a
    KKT point.
    """
    n = len(problem.b)
    if n == 0:
        return PDASState(np.zeros(0), np.zeros(0, bool), np.zeros(0, bool), 0, np.zeros(0))
    A, b = problem.A, problem.b

    if warm_start is not None:
        lower = np.asarray(warm_start[0], dtype=bool).copy()
        upper = np.asarray(warm_start[1], dtype=bool).copy()
        upper &= ~lower
    else:
        lower = np.zeros(n, dtype=bool)
        upper = np.zeros(n, dtype=bool)

    total = 0
    w = np.zeros(n)
    for c_now in (c, 10.0 * c, 100.0 * c):
        seen = set()
        cycled = False
        while total < max_iter * 3 and len(seen) < max_iter:
            total += 1
            w = _reduced_solve(A, b, lower, upper)
            r = A @ w - b
            new_lower = r - c_now * w > 0.0
            new_upper = -r + c_now * (w - 1.0) > 0.0
            if np.array_equal(new_lower, lower) and np.array_equal(new_upper, upper):
                return PDASState(w, lower.copy(), upper.copy(), total, -r)
            signature = (new_lower.tobytes(), new_upper.tobytes())
            lower, upper = new_lower, new_upper
            if signature in seen:
                cycled = True
                break
            seen.add(signature)
        if not cycled and total >= max_iter * 3:
            break
        logger.debug("active sets cycled at c=%g; escalating", c_now)

    lower, upper, sweeps = _projected_gauss_seidel(A, b, w)
    total += sweeps
    w = _reduced_solve(A, b, lower, upper)
    r = A @ w - b
    tol = 1e-9 * max(1.0, float(np.abs(b).max()))
    feasible = (
        np.all(w >= -tol)
        and np.all(w <= 1.0 + tol)
        and (not lower.any() or np.all(r[lower] >= -tol))
        and (not upper.any() or np.all(-r[upper] >= -tol))
    )
    if not feasible:
        raise PDASError("no KKT point found after %d iterations" % total)
    logger.debug("fallback solve converged after %d sweeps", sweeps)
    return PDASState(w, lower, upper, total, -r)


def gradient_flow_step(
    v_n,
    pairs,
    params,
    *,
    tau,
    alpha_tilde,
    epsilon,
    matrices=None,
    warm_start=None,
):
    """One implicit step of the phase-field flow.

    pairs holds the (forward, adjoint) solutions at v_n for every load.
    Returns the new phase field, the active-set state, and the QP it
    solved (for certification).
    """
    if matrices is None:
        matrices = StepMatrices.build(v_n.mesh)
    G = assemble_gradient_density(v_n.mesh, params, pairs)
    problem = build_step_problem(
        v_n, G, matrices, tau=tau, alpha_tilde=alpha_tilde, epsilon=epsilon
    )
    state = pdas_solve(problem, warm_start=warm_start)
    values = problem.expand(np.clip(state.solution, 0.0, 1.0))
    v_next = PhaseField(v_n.mesh, values, v_n.frozen)
    return v_next, state, problem


def vi_slack(problem, w, rng, trials=100):
    """Smallest slack of the QP's variational inequality over random
    feasible test points; the exact solution gives values >= 0."""
    worst = np.inf
    for _ in range(trials):
        omega = rng.uniform(0.0, 1.0, size=len(problem.b))
        worst = min(worst, problem.slack(w, omega))
    return worst
