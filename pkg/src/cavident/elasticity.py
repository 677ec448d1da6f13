"""Forward and adjoint elasticity solves and the boundary misfit.

Each load case pairs a surface traction with displacement measurements on
the Neumann boundary. The forward problem uses the ersatz-material
coefficient; the adjoint problem shares its operator (the operator is
self-adjoint), with the measurement mismatch as a boundary source.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .fem import (
    DisplacementField,
    ElasticityParams,
    FactorizedOperator,
    assemble_elastic_stiffness,
    assemble_traction_load,
    neumann_edge_mass,
)
from .mesh import EdgeKind, TriMesh, interpolate_boundary_trace

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoadCase:
    """One experiment: a traction on the Neumann boundary plus what was measured.

    measurement rows align with mesh.neumann_vertices. source_trace, when
    present, is the full boundary trace the measurement was sampled from;
    it lets the measurement follow the mesh through refinement.
    """

    id: int
    traction: Callable[[np.ndarray], np.ndarray]
    measurement: np.ndarray  # (n_neumann, 2)
    source_trace: Optional[object] = None

    def resampled(self, mesh, source_mesh=None):
        """Measurement aligned to a (possibly refined) mesh."""
        if self.source_trace is not None:
            from .mesh import square_boundary_param

            t = square_boundary_param(mesh.vertices[mesh.neumann_vertices])
            values = self.source_trace.sample(t)
            return LoadCase(self.id, self.traction, values, self.source_trace)
        if source_mesh is None:
            raise ValueError("measurement has no source trace; pass its mesh")
        full = np.zeros((source_mesh.n_vertices, 2))
        full[source_mesh.neumann_vertices] = self.measurement
        _, values = interpolate_boundary_trace(source_mesh, full, mesh)
        return LoadCase(self.id, self.traction, values, None)


def fixed_displacement_dofs(mesh):
    """Interleaved dof indices clamped by the Dirichlet boundary."""
    nodes = mesh.dirichlet_vertices
    return np.concatenate([2 * nodes, 2 * nodes + 1])


def elastic_operator(mesh, params, v=None):
    """Factorized ersatz-material operator with homogeneous Dirichlet part."""
    K = assemble_elastic_stiffness(mesh, params, v)
    return FactorizedOperator(K, fixed_displacement_dofs(mesh))


def solve_forward(mesh, params, load, v=None, operator=None):
    """Displacement under the load's traction at phase field v."""
    if operator is None:
        operator = elastic_operator(mesh, params, v)
    f = assemble_traction_load(mesh, load.traction)
    u = operator.solve(f)
    return DisplacementField(mesh, u.reshape(-1, 2))


def solve_adjoint(mesh, params, load, u, v=None, operator=None):
    """Adjoint state driven by the boundary mismatch of u against the load."""
    if operator is None:
        operator = elastic_operator(mesh, params, v)
    d = np.zeros((mesh.n_vertices, 2))
    d[mesh.neumann_vertices] = u.values[mesh.neumann_vertices] - load.measurement
    Bm = neumann_edge_mass(mesh)
    rhs = np.zeros(2 * mesh.n_vertices)
    rhs[0::2] = Bm @ d[:, 0]
    rhs[1::2] = Bm @ d[:, 1]
    p = operator.solve(rhs)
    return DisplacementField(mesh, p.reshape(-1, 2))


def solve_true_cavity(mesh, params, traction):
    """Displacement of the exact cavity domain (coefficient one everywhere).

    The mesh is expected to carry CAVITY_WALL edges; those are traction
    free, so they contribute nothing to the load.
    """
    K = assemble_elastic_stiffness(mesh, params, v=None)
    op = FactorizedOperator(K, fixed_displacement_dofs(mesh))
    f = assemble_traction_load(mesh, traction, kinds=(EdgeKind.NEUMANN,))
    u = op.solve(f)
    return DisplacementField(mesh, u.reshape(-1, 2))


def misfit(mesh, u, load, edge_mass=None):
    """Half the squared L2 boundary distance between u and the measurement."""
    if edge_mass is None:
        edge_mass = neumann_edge_mass(mesh)
    d = np.zeros((mesh.n_vertices, 2))
    d[mesh.neumann_vertices] = u.values[mesh.neumann_vertices] - load.measurement
    return 0.5 * (d[:, 0] @ (edge_mass @ d[:, 0]) + d[:, 1] @ (edge_mass @ d[:, 1]))


def total_misfit(mesh, fields, loads, edge_mass=None):
    """Average misfit over the load cases."""
    if edge_mass is None:
        edge_mass = neumann_edge_mass(mesh)
    return sum(misfit(mesh, u, g, edge_mass) for u, g in zip(fields, loads)) / len(loads)
