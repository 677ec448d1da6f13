"""Piecewise-linear finite elements on triangle meshes.

Assembly of the ersatz-material elasticity operator, scalar mass and
stiffness matrices, and boundary/volume load vectors. Displacement dofs
are interleaved: vertex i carries dofs 2i (x) and 2i+1 (y).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)


class SolveError(Exception):
    """Raised when a linear solve cannot be trusted."""


@dataclass(frozen=True)
class ElasticityParams:
    """Lame constants of the background material and the ersatz factor.

    The void region is filled with the same material scaled by delta, so
    the coefficient field is (1 + (delta - 1) * v) with v the void fraction.
    """

    mu: float
    lam: float
    delta: float = 1e-2

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("shear modulus must be positive")
        if self.lam + self.mu <= 0:
            raise ValueError("lam + mu must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("ersatz factor delta must lie in (0, 1)")

    @property
    def poisson_ratio(self):
        return self.lam / (2.0 * (self.lam + self.mu))

    def voigt_matrix(self):
        """Stress-strain matrix for (e_xx, e_yy, 2*e_xy)."""
        mu, lam = self.mu, self.lam
        return np.array(
            [
                [2.0 * mu + lam, lam, 0.0],
                [lam, 2.0 * mu + lam, 0.0],
                [0.0, 0.0, mu],
            ]
        )


def elasticity_tensor_apply(params, strain):
    """Apply the isotropic tensor: 2*mu*e + lam*tr(e)*I, for (..., 2, 2) e."""
    strain = np.asarray(strain, dtype=float)
    tr = strain[..., 0, 0] + strain[..., 1, 1]
    out = 2.0 * params.mu * strain
    out[..., 0, 0] += params.lam * tr
    out[..., 1, 1] += params.lam * tr
    return out


def _hat_gradients(mesh):
    """Gradients of the nodal hats: (nt, 3) arrays b (d/dx) and c (d/dy)."""
    p = mesh.vertices
    t = mesh.triangles
    x = p[t, 0]
    y = p[t, 1]
    area2 = 2.0 * mesh.areas
    b = np.stack(
        [y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1
    ) / area2[:, None]
    c = np.stack(
        [x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1
    ) / area2[:, None]
    return b, c


def strain_displacement_matrices(mesh):
    """Per-triangle Voigt strain matrices B, shape (nt, 3, 6).

    Rows are (e_xx, e_yy, 2*e_xy); columns follow the interleaved local
    dofs (u1x, u1y, u2x, u2y, u3x, u3y).
    """
    b, c = _hat_gradients(mesh)
    nt = mesh.n_triangles
    B = np.zeros((nt, 3, 6))
    B[:, 0, 0::2] = b
    B[:, 1, 1::2] = c
    B[:, 2, 0::2] = c
    B[:, 2, 1::2] = b
    return B


def assemble_elastic_stiffness(mesh, params, v=None):
    """Stiffness of the ersatz-material operator, (2nv, 2nv) csr.

    With v a nodal field in [0, 1], each triangle is scaled by
    1 + (delta - 1) * mean(v on its vertices); v=None means v=0 everywhere
    (pure background material).
    """
    B = strain_displacement_matrices(mesh)
    D = params.voigt_matrix()
    if v is None:
        coef = np.ones(mesh.n_triangles)
    else:
        v = np.asarray(v, dtype=float)
        coef = 1.0 + (params.delta - 1.0) * v[mesh.triangles].mean(axis=1)
    scale = mesh.areas * coef
    Ke = np.einsum("tia,ij,tjb->tab", B, D, B) * scale[:, None, None]

    t = mesh.triangles
    dofs = np.empty((mesh.n_triangles, 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * t
    dofs[:, 1::2] = 2 * t + 1
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.n_vertices
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


def assemble_scalar_mass(mesh):
    """P1 mass matrix, (nv, nv) csr."""
    t = mesh.triangles
    local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    Me = local[None, :, :] * mesh.areas[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    nv = mesh.n_vertices
    M = sp.coo_matrix((Me.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    M.sum_duplicates()
    return M


def assemble_scalar_stiffness(mesh):
    """P1 stiffness (Laplacian) matrix, (nv, nv) csr."""
    b, c = _hat_gradients(mesh)
    Ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) * mesh.areas[
        :, None, None
    ]
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    nv = mesh.n_vertices
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    K.sum_duplicates()
    return K


def assemble_traction_load(mesh, traction, kinds=None):
    """Load vector of a boundary traction, (2nv,).

    traction maps (m, 2) points to (m, 2) values; it is integrated with the
    trapezoid-exact rule for linear data on each edge of the given kinds
    (default: Neumann edges only).
    """
    from .mesh import EdgeKind

    if kinds is None:
        kinds = (EdgeKind.NEUMANN,)
    mask = np.isin(mesh.edge_kinds, np.array(kinds, dtype=np.int8))
    edges = mesh.boundary_edges[mask]
    f = np.zeros(2 * mesh.n_vertices)
    if len(edges) == 0:
        return f
    pa = mesh.vertices[edges[:, 0]]
    pb = mesh.vertices[edges[:, 1]]
    L = np.linalg.norm(pb - pa, axis=1)
    ga = np.asarray(traction(pa), dtype=float)
    gb = np.asarray(traction(pb), dtype=float)
    # exact for linear g: int g phi_a = (L/6)(2 g_a + g_b)
    wa = (L / 6.0)[:, None] * (2.0 * ga + gb)
    wb = (L / 6.0)[:, None] * (ga + 2.0 * gb)
    for k in range(2):
        np.add.at(f, 2 * edges[:, 0] + k, wa[:, k])
        np.add.at(f, 2 * edges[:, 1] + k, wb[:, k])
    return f


def assemble_body_load(mesh, body_force):
    """Load vector of a volumetric force given nodally, (2nv,)."""
    M = assemble_scalar_mass(mesh)
    body_force = np.asarray(body_force, dtype=float)
    f = np.zeros(2 * mesh.n_vertices)
    f[0::2] = M @ body_force[:, 0]
    f[1::2] = M @ body_force[:, 1]
    return f


def neumann_edge_mass(mesh):
    """Mass matrix of the Neumann boundary, (nv, nv) csr.

    Row/column support is the Neumann vertex set; quadrature is exact for
    products of linear functions on each edge.
    """
    edges = mesh.neumann_edges()
    nv = mesh.n_vertices
    if len(edges) == 0:
        return sp.csr_matrix((nv, nv))
    L = mesh.edge_lengths(edges)
    rows = np.concatenate([edges[:, 0], edges[:, 1], edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 0], edges[:, 1], edges[:, 1], edges[:, 0]])
    data = np.concatenate([L / 3.0, L / 3.0, L / 6.0, L / 6.0])
    B = sp.coo_matrix((data, (rows, cols)), shape=(nv, nv)).tocsr()
    B.sum_duplicates()
    return B


class FactorizedOperator:
    """LU factorization of a symmetric operator with fixed (Dirichlet) dofs.

    Solves A u = f with u prescribed on the fixed dofs, verifying the free
    residual after each solve. Fixed values passed to solve() align with
    the sorted fixed-dof indices (the `fixed` attribute), not with the
    order fixed_dofs was given in.
    """

    def __init__(self, matrix, fixed_dofs, residual_tol=1e-10):
        n = matrix.shape[0]
        fixed = np.zeros(n, dtype=bool)
        fixed[np.asarray(fixed_dofs, dtype=np.int64)] = True
        self.free = np.flatnonzero(~fixed)
        self.fixed = np.flatnonzero(fixed)
        self.matrix = matrix.tocsr()
        self.residual_tol = residual_tol
        A_ff = self.matrix[self.free][:, self.free].tocsc()
        try:
            self._lu = splu(A_ff)
        except RuntimeError as exc:
            raise SolveError("operator is singular on the free dofs: %s" % exc) from exc
        self._A_fc = self.matrix[self.free][:, self.fixed].tocsr()

    def solve(self, rhs, fixed_values=None):
        rhs = np.asarray(rhs, dtype=float)
        n = self.matrix.shape[0]
        u = np.zeros(n)
        if fixed_values is not None:
            u[self.fixed] = fixed_values
        b_f = rhs[self.free] - self._A_fc @ u[self.fixed]
        u_f = self._lu.solve(b_f)
        res = np.linalg.norm(b_f - (self.matrix[self.free][:, self.free] @ u_f))
        scale = max(np.linalg.norm(b_f), 1.0)
        if not np.isfinite(u_f).all() or res > self.residual_tol * scale:
            raise SolveError("linear solve residual %.3e exceeds tolerance" % (res / scale))
        u[self.free] = u_f
        return u


def solve_spd(matrix, rhs, fixed_dofs, fixed_values=None):
    """One-shot constrained solve; factor explicitly to reuse."""
    return FactorizedOperator(matrix, fixed_dofs).solve(rhs, fixed_values)


@dataclass(frozen=True)
class DisplacementField:
    """Nodal displacement on a mesh."""

    mesh: object
    values: np.ndarray  # (nv, 2)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float)
        if values.shape != (self.mesh.n_vertices, 2):
            raise ValueError("displacement shape does not match the mesh")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @cached_property
    def flat(self):
        return self.values.ravel()

    def strains(self):
        """Per-triangle Voigt strains (e_xx, e_yy, 2 e_xy), (nt, 3)."""
        B = strain_displacement_matrices(self.mesh)
        t = self.mesh.triangles
        local = np.empty((self.mesh.n_triangles, 6))
        local[:, 0::2] = self.values[t, 0]
        local[:, 1::2] = self.values[t, 1]
        return np.einsum("tij,tj->ti", B, local)
