"""Synthetic measurement generation and measurement file I/O.

Measurements come from solving the true cavity problem on a finer mesh
than the reconstruction uses, so the data never matches the working
discretization exactly. Noise is injected into the generator's boundary
trace before it is sampled onto the working mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .elasticity import LoadCase, solve_true_cavity
from .mesh import BoundaryTrace, build_square_mesh, carve_cavity, extract_boundary_trace, square_boundary_param

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian noise on measured displacements.

    level is in percent. mode 'relative-max' scales by the largest
    displacement magnitude of the trace; 'pointwise' scales each entry by
    its own magnitude.
    """

    level: float
    seed: int = 0
    mode: str = "relative-max"

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("noise level must be nonnegative")
        if self.mode not in ("relative-max", "pointwise"):
            raise ValueError("unknown noise mode %r" % self.mode)


def add_noise(values, spec, stream=0):
    """Perturb measurement values; stream separates the load cases."""
    values = np.asarray(values, dtype=float)
    if spec is None or spec.level == 0.0:
        return values.copy()
    rng = np.random.default_rng((spec.seed, stream))
    eta = rng.standard_normal(values.shape)
    if spec.mode == "relative-max":
        scale = np.max(np.abs(values))
    else:
        scale = np.abs(values)
    return values + (spec.level / 100.0) * scale * eta


def generate_measurements(
    target,
    loads,
    generator_resolution,
    working_mesh,
    params,
    *,
    dirichlet_sides=("bottom",),
    noise=None,
    d0=0.1,
):
    """Measurements for the given tractions, sampled onto working_mesh.

    target is a cavity shape (None for the defect-free body). Each entry of
    loads is (id, traction). Returns LoadCase objects whose source_trace is
    the (noisy) generator trace, so refined meshes can resample it.
    """
    loads = list(loads)
    if not loads:
        raise ValueError("at least one load case is required")
    working_n = int(round(2.0 / working_mesh.max_diameter * np.sqrt(2.0)))
    if generator_resolution <= working_n:
        raise ValueError(
            "generator resolution %d is not finer than the working mesh"
            % generator_resolution
        )
    generator = build_square_mesh(generator_resolution, dirichlet_sides)
    if target is not None:
        generator = carve_cavity(generator, target, d0=d0)
    nodes = working_mesh.neumann_vertices
    t = square_boundary_param(working_mesh.vertices[nodes])

    cases = []
    for stream, (load_id, traction) in enumerate(loads):
        u = solve_true_cavity(generator, params, traction)
        trace = extract_boundary_trace(generator, u.values)
        noisy = BoundaryTrace(trace.params, add_noise(trace.values, noise, stream=stream))
        cases.append(LoadCase(load_id, traction, noisy.sample(t), source_trace=noisy))
    logger.info(
        "generated %d load cases on a %dx%d generator mesh",
        len(cases),
        generator_resolution,
        generator_resolution,
    )
    return cases


def write_measurement(path, mesh, load_id, values, header_fields=None):
    """Write one load case's boundary measurement as text.

    Rows are (x, y, u1, u2) at the Neumann boundary nodes; '#' header lines
    record the provenance fields.
    """
    nodes = mesh.neumann_vertices
    fields = {"load": load_id, "boundary-nodes": len(nodes)}
    if header_fields:
        fields.update(header_fields)
    lines = ["# boundary displacement measurement"]
    for key, val in fields.items():
        lines.append("# %s: %s" % (key, val))
    lines.append("# columns: x y u1 u2")
    for (x, y), (u1, u2) in zip(mesh.vertices[nodes], values):
        lines.append("%.17g %.17g %.17g %.17g" % (x, y, u1, u2))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_measurement(path):
    """Read a measurement file: (header dict, points (n,2), values (n,2))."""
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, val = body.partition(":")
                    header[key.strip()] = val.strip()
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError("malformed measurement row: %r" % line)
            rows.append([float(p) for p in parts])
    data = np.asarray(rows, dtype=float)
    if data.size == 0:
        raise ValueError("measurement file %s holds no data rows" % path)
    return header, data[:, :2], data[:, 2:]


def load_case_from_file(path, mesh, traction, tol=1e-8):
    """Rebuild a LoadCase from a measurement file on the given mesh.

    Points must coincide with the mesh's Neumann nodes (any order); if they
    do not, the values are treated as a boundary trace and re-sampled.
    """
    header, points, values = read_measurement(path)
    load_id = int(header.get("load", 0))
    nodes = mesh.neumann_vertices
    own = mesh.vertices[nodes]
    if len(points) == len(own):
        t_own = square_boundary_param(own)
        t_file = square_boundary_param(points)
        order_own = np.argsort(t_own)
        order_file = np.argsort(t_file)
        if np.allclose(t_own[order_own], t_file[order_file], atol=tol):
            aligned = np.empty_like(values)
            aligned[order_own] = values[order_file]
            return LoadCase(load_id, traction, aligned, None)
    logger.warning("measurement points in %s do not match the mesh; resampling", path)
    t_file = square_boundary_param(points)
    order = np.argsort(t_file)
    trace = BoundaryTrace(t_file[order], values[order])
    return LoadCase(load_id, traction, trace.sample(square_boundary_param(own)), trace)
