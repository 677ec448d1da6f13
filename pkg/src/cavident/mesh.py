"""Triangulations of the computational square and of cavity-bearing domains.

The working domain is always the square (-1, 1)^2. Meshes are immutable
snapshots: every operation returns a new mesh and never mutates its input,
so meshes can be shared freely across threads.

Triangles are stored counterclockwise with the bisection edge last: a
triangle (v0, v1, v2) is refined by splitting the edge (v1, v2) at its
midpoint, which makes v0 the newest vertex of its parent. The structured
square mesh labels the cell diagonals as bisection edges, a compatible
initial labeling, so newest-vertex bisection with closure always terminates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

# Sides of the square in perimeter order; also the boundary segment ids.
SIDE_NAMES = ("bottom", "right", "top", "left")

# Perimeter of (-1,1)^2 under the arclength parametrization used for
# boundary traces.
BOUNDARY_PERIOD = 8.0

_GEOM_TOL = 1e-10


class MeshError(Exception):
    """Raised when an operation would produce an invalid triangulation."""


class EdgeKind(IntEnum):
    DIRICHLET = 0
    NEUMANN = 1
    CAVITY_WALL = 2


# ---------------------------------------------------------------------------
# cavity shapes


@dataclass(frozen=True)
class Disk:
    center: Tuple[float, float]
    radius: float

    def contains(self, points):
        p = np.atleast_2d(points)
        dx = p[:, 0] - self.center[0]
        dy = p[:, 1] - self.center[1]
        return dx * dx + dy * dy <= self.radius * self.radius

    def area(self):
        return np.pi * self.radius**2

    def centroid(self):
        return np.array(self.center, dtype=float)

    def boundary_margin(self):
        cx, cy = self.center
        return 1.0 - max(abs(cx), abs(cy)) - self.radius

    def describe(self):
        return "disk(center=(%g,%g),radius=%g)" % (*self.center, self.radius)


@dataclass(frozen=True)
class AxisSquare:
    center: Tuple[float, float]
    half_side: float

    def contains(self, points):
        p = np.atleast_2d(points)
        dx = np.abs(p[:, 0] - self.center[0])
        dy = np.abs(p[:, 1] - self.center[1])
        return np.maximum(dx, dy) <= self.half_side

    def area(self):
        return (2.0 * self.half_side) ** 2

    def centroid(self):
        return np.array(self.center, dtype=float)

    def boundary_margin(self):
        cx, cy = self.center
        return 1.0 - max(abs(cx), abs(cy)) - self.half_side

    def describe(self):
        return "square(center=(%g,%g),half_side=%g)" % (*self.center, self.half_side)


@dataclass(frozen=True)
class Polygon:
    """Simple polygon given by its vertices (either orientation)."""

    points: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        object.__setattr__(self, "points", tuple(map(tuple, self.points)))

    def _verts(self):
        return np.asarray(self.points, dtype=float)

    def contains(self, points):
        # even-odd ray casting, vectorized over the query points
        p = np.atleast_2d(points)
        x, y = p[:, 0], p[:, 1]
        verts = self._verts()
        inside = np.zeros(len(p), dtype=bool)
        j = len(verts) - 1
        for i in range(len(verts)):
            xi, yi = verts[i]
            xj, yj = verts[j]
            crosses = (yi > y) != (yj > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xcut = (xj - xi) * (y - yi) / (yj - yi) + xi
            inside ^= crosses & (x < xcut)
            j = i
        return inside

    def _signed_area(self):
        v = self._verts()
        x, y = v[:, 0], v[:, 1]
        return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)

    def area(self):
        return abs(self._signed_area())

    def centroid(self):
        v = self._verts()
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        a = 0.5 * np.sum(cross)
        cx = np.sum((x + xn) * cross) / (6.0 * a)
        cy = np.sum((y + yn) * cross) / (6.0 * a)
        return np.array([cx, cy])

    def boundary_margin(self):
        v = self._verts()
        return 1.0 - float(np.max(np.abs(v)))

    def describe(self):
        pts = ";".join("(%g,%g)" % (x, y) for x, y in self.points)
        return "polygon(%s)" % pts


@dataclass(frozen=True)
class ShapeUnion:
    """Union of disjoint shapes (area and centroid assume no overlap)."""

    members: Tuple[object, ...]

    def __post_init__(self):
        if not self.members:
            raise ValueError("empty shape union")
        object.__setattr__(self, "members", tuple(self.members))

    def contains(self, points):
        p = np.atleast_2d(points)
        inside = np.zeros(len(p), dtype=bool)
        for m in self.members:
            inside |= m.contains(p)
        return inside

    def area(self):
        return sum(m.area() for m in self.members)

    def centroid(self):
        areas = np.array([m.area() for m in self.members])
        cents = np.array([m.centroid() for m in self.members])
        return (areas[:, None] * cents).sum(axis=0) / areas.sum()

    def boundary_margin(self):
        return min(m.boundary_margin() for m in self.members)

    def describe(self):
        return "union(%s)" % ",".join(m.describe() for m in self.members)


# ---------------------------------------------------------------------------
# the mesh


@dataclass(frozen=True)
class TriMesh:
    """Conforming triangulation with tagged boundary edges.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array
        Counterclockwise, bisection edge last (columns 1 and 2).
    boundary_edges : (ne, 2) int array
    edge_kinds : (ne,) int8 array of EdgeKind values
    edge_segments : (ne,) int array
        Side index 0..3 for outer edges (bottom, right, top, left),
        -1 for cavity walls.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_kinds: np.ndarray
    edge_segments: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(self.vertices, float))
        object.__setattr__(self, "triangles", _readonly(self.triangles, np.int64))
        object.__setattr__(self, "boundary_edges", _readonly(self.boundary_edges, np.int64))
        object.__setattr__(self, "edge_kinds", _readonly(self.edge_kinds, np.int8))
        object.__setattr__(self, "edge_segments", _readonly(self.edge_segments, np.int64))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @cached_property
    def areas(self):
        p = self.vertices
        t = self.triangles
        d1 = p[t[:, 1]] - p[t[:, 0]]
        d2 = p[t[:, 2]] - p[t[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def max_diameter(self):
        p = self.vertices[self.triangles]
        sides = np.stack(
            [
                np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
                np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
                np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
            ]
        )
        return float(sides.max())

    @cached_property
    def dirichlet_vertices(self):
        return np.unique(self.boundary_edges[self.edge_kinds == EdgeKind.DIRICHLET])

    @cached_property
    def neumann_vertices(self):
        return np.unique(self.boundary_edges[self.edge_kinds == EdgeKind.NEUMANN])

    def neumann_edges(self):
        return self.boundary_edges[self.edge_kinds == EdgeKind.NEUMANN]

    def cavity_edges(self):
        return self.boundary_edges[self.edge_kinds == EdgeKind.CAVITY_WALL]

    @cached_property
    def outer_boundary_vertices(self):
        mask = self.edge_kinds != EdgeKind.CAVITY_WALL
        return np.unique(self.boundary_edges[mask])

    def edge_lengths(self, edges):
        d = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def cavity_loop_count(self):
        """Number of closed cavity-wall loops."""
        edges = self.cavity_edges()
        if len(edges) == 0:
            return 0
        nodes = np.unique(edges)
        relabel = {v: i for i, v in enumerate(nodes)}
        rows = np.array([relabel[v] for v in edges[:, 0]])
        cols = np.array([relabel[v] for v in edges[:, 1]])
        n = len(nodes)
        graph = sp.coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(n, n))
        count, _ = connected_components(graph, directed=False)
        return int(count)

    def triangle_adjacency(self):
        """Sparse nt x nt adjacency over shared edges."""
        keys, _, t2e = _edge_table(self.triangles, self.n_vertices)
        owners = np.repeat(np.arange(self.n_triangles), 3)
        order = np.argsort(t2e.ravel(), kind="stable")
        sorted_edges = t2e.ravel()[order]
        sorted_owners = owners[order]
        same = sorted_edges[1:] == sorted_edges[:-1]
        a = sorted_owners[:-1][same]
        b = sorted_owners[1:][same]
        nt = self.n_triangles
        data = np.ones(len(a))
        return sp.coo_matrix((data, (a, b)), shape=(nt, nt))

    def export_vtk(self, path, point_data=None, cell_data=None, title="cavident mesh"):
        """Write the mesh (legacy VTK text, unstructured grid)."""
        lines = [
            "# vtk DataFile Version 3.0",
            title,
            "ASCII",
            "DATASET UNSTRUCTURED_GRID",
            "POINTS %d double" % self.n_vertices,
        ]
        for x, y in self.vertices:
            lines.append("%.17g %.17g 0" % (x, y))
        nt = self.n_triangles
        lines.append("CELLS %d %d" % (nt, 4 * nt))
        for a, b, c in self.triangles:
            lines.append("3 %d %d %d" % (a, b, c))
        lines.append("CELL_TYPES %d" % nt)
        lines.extend(["5"] * nt)
        if point_data:
            lines.append("POINT_DATA %d" % self.n_vertices)
            for name, values in point_data.items():
                values = np.asarray(values)
                if values.ndim == 1:
                    lines.append("SCALARS %s double 1" % name)
                    lines.append("LOOKUP_TABLE default")
                    lines.extend("%.17g" % v for v in values)
                else:
                    lines.append("VECTORS %s double" % name)
                    lines.extend("%.17g %.17g 0" % (vx, vy) for vx, vy in values)
        if cell_data:
            lines.append("CELL_DATA %d" % nt)
            for name, values in cell_data.items():
                lines.append("SCALARS %s double 1" % name)
                lines.append("LOOKUP_TABLE default")
                lines.extend("%.17g" % v for v in np.asarray(values))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _readonly(arr, dtype):
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


def _edge_table(triangles, n_vertices):
    """Unique edges of a triangulation.

    Returns (keys, edge_nodes, t2e): sorted integer keys of the unique
    edges, their (ne, 2) vertex pairs, and the (nt, 3) triangle-to-edge
    incidence. Column 0 of t2e is the bisection edge.
    """
    tri_edges = np.stack(
        [triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]], axis=1
    )  # (nt, 3, 2)
    lo = tri_edges.min(axis=2)
    hi = tri_edges.max(axis=2)
    all_keys = lo.astype(np.int64) * n_vertices + hi
    keys, inverse = np.unique(all_keys.ravel(), return_inverse=True)
    t2e = inverse.reshape(-1, 3)
    edge_nodes = np.column_stack(divmod(keys, n_vertices))
    return keys, edge_nodes, t2e


def _check_conforming(mesh, context):
    areas = mesh.areas
    if not np.all(areas > 1e-14):
        raise MeshError("%s: non-positive triangle area (min %.3e)" % (context, areas.min()))
    keys, edge_nodes, t2e = _edge_table(mesh.triangles, mesh.n_vertices)
    counts = np.bincount(t2e.ravel(), minlength=len(keys))
    if counts.max() > 2:
        raise MeshError("%s: edge shared by more than two triangles" % context)
    boundary_keys = np.sort(
        mesh.boundary_edges.min(axis=1) * np.int64(mesh.n_vertices)
        + mesh.boundary_edges.max(axis=1)
    )
    mesh_boundary = np.sort(keys[counts == 1])
    if len(boundary_keys) != len(mesh_boundary) or not np.array_equal(
        boundary_keys, mesh_boundary
    ):
        raise MeshError("%s: tagged boundary does not match the mesh boundary" % context)
    if len(np.unique(boundary_keys)) != len(boundary_keys):
        raise MeshError("%s: duplicate boundary edge tags" % context)
    used = np.unique(mesh.triangles)
    if len(used) != mesh.n_vertices:
        raise MeshError("%s: mesh contains isolated vertices" % context)


# ---------------------------------------------------------------------------
# construction


def build_square_mesh(n_per_side, dirichlet_sides=("bottom",)):
    """Structured criss-cross triangulation of (-1,1)^2.

    Each grid cell is split by one diagonal, alternating per cell, and the
    diagonals carry the bisection labels. Boundary edges on the sides named
    in dirichlet_sides are tagged Dirichlet, the remaining sides Neumann.
    """
    n = int(n_per_side)
    if n < 2:
        raise MeshError("n_per_side must be at least 2")
    dirichlet_sides = _normalize_sides(dirichlet_sides)

    coords = np.linspace(-1.0, 1.0, n + 1)
    xs, ys = np.meshgrid(coords, coords, indexing="xy")
    vertices = np.column_stack([xs.ravel(), ys.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ii, jj = ii.ravel(), jj.ravel()
    a = vid(ii, jj)
    b = vid(ii + 1, jj)
    c = vid(ii + 1, jj + 1)
    d = vid(ii, jj + 1)
    even = (ii + jj) % 2 == 0

    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    # diagonal a-c on even cells, b-d on odd cells; peak stored first
    tris[0::2] = np.where(even[:, None], np.column_stack([b, c, a]), np.column_stack([a, b, d]))
    tris[1::2] = np.where(even[:, None], np.column_stack([d, a, c]), np.column_stack([c, d, b]))

    k = np.arange(n)
    side_edges = [
        np.column_stack([vid(k, 0), vid(k + 1, 0)]),      # bottom
        np.column_stack([vid(n, k), vid(n, k + 1)]),      # right
        np.column_stack([vid(k, n), vid(k + 1, n)]),      # top
        np.column_stack([vid(0, k), vid(0, k + 1)]),      # left
    ]
    boundary_edges = np.vstack(side_edges)
    edge_segments = np.repeat(np.arange(4), n)
    kinds = np.where(
        np.isin(edge_segments, [SIDE_NAMES.index(s) for s in dirichlet_sides]),
        np.int8(EdgeKind.DIRICHLET),
        np.int8(EdgeKind.NEUMANN),
    )

    mesh = TriMesh(vertices, tris, boundary_edges, kinds, edge_segments)
    _check_conforming(mesh, "build_square_mesh")
    return mesh


def _normalize_sides(sides):
    if isinstance(sides, str):
        sides = (sides,)
    sides = tuple(sides)
    unknown = [s for s in sides if s not in SIDE_NAMES]
    if unknown:
        raise MeshError("unknown boundary sides: %s" % unknown)
    if not sides:
        raise MeshError("Dirichlet part of the boundary must be nonempty")
    if set(sides) == set(SIDE_NAMES):
        raise MeshError("Neumann part of the boundary must be nonempty")
    return sides


# ---------------------------------------------------------------------------
# carving


def carve_cavity(mesh, shape, d0=0.1):
    """Remove the triangles whose centroid lies inside shape.

    Newly exposed edges are tagged CAVITY_WALL (traction free). The shape
    must keep distance at least d0 from the outer boundary, and the removal
    must neither disconnect the remaining domain nor be empty.
    """
    if shape.boundary_margin() < d0:
        raise MeshError(
            "cavity shape too close to the boundary (margin %.3g < %.3g)"
            % (shape.boundary_margin(), d0)
        )
    inside = shape.contains(mesh.centroids)
    if not inside.any():
        raise MeshError("cavity shape removes no triangles; refine the mesh")
    keep = ~inside

    adj = mesh.triangle_adjacency().tocsr()[keep][:, keep]
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise MeshError("cavity removal disconnects the domain")

    old_boundary_keys = (
        mesh.boundary_edges.min(axis=1) * np.int64(mesh.n_vertices)
        + mesh.boundary_edges.max(axis=1)
    )
    removed_tris = mesh.triangles[inside]
    removed_keys = _edge_table(removed_tris, mesh.n_vertices)[0]
    if np.intersect1d(removed_keys, old_boundary_keys).size:
        raise MeshError("cavity reaches the outer boundary; use a finer mesh")

    kept_tris = mesh.triangles[keep]
    keys, edge_nodes, t2e = _edge_table(kept_tris, mesh.n_vertices)
    counts = np.bincount(t2e.ravel(), minlength=len(keys))
    bnd_keys = keys[counts == 1]
    bnd_nodes = edge_nodes[counts == 1]

    # keep tags of surviving outer edges, tag the rest as cavity wall
    order = np.argsort(old_boundary_keys)
    pos = np.searchsorted(old_boundary_keys[order], bnd_keys)
    pos = np.clip(pos, 0, len(order) - 1)
    is_old = old_boundary_keys[order][pos] == bnd_keys
    kinds = np.full(len(bnd_keys), np.int8(EdgeKind.CAVITY_WALL))
    segments = np.full(len(bnd_keys), -1, dtype=np.int64)
    kinds[is_old] = mesh.edge_kinds[order][pos[is_old]]
    segments[is_old] = mesh.edge_segments[order][pos[is_old]]

    # drop vertices that only supported removed triangles
    used = np.unique(kept_tris)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    carved = TriMesh(
        mesh.vertices[used],
        remap[kept_tris],
        remap[bnd_nodes],
        kinds,
        segments,
    )
    _check_conforming(carved, "carve_cavity")
    logger.debug(
        "carved %s: removed %d of %d triangles", shape.describe(), inside.sum(), mesh.n_triangles
    )
    return carved


# ---------------------------------------------------------------------------
# adaptive refinement


def refine_by_indicator(mesh, indicator, fraction=0.5):
    """Bisect the triangles marked by Doerfler selection, with closure.

    Marks the smallest set of triangles carrying at least `fraction` of the
    total indicator mass, then applies newest-vertex bisection; closure
    marks keep the result conforming. Returns the refined mesh and a sparse
    matrix that transfers nodal values by linear interpolation (midpoint
    averaging, exact for globally linear fields).
    """
    indicator = np.asarray(indicator, dtype=float)
    if indicator.shape != (mesh.n_triangles,):
        raise MeshError("indicator length must equal the triangle count")
    if np.any(indicator < 0):
        raise MeshError("indicator must be nonnegative")
    if not 0.0 < fraction <= 1.0:
        raise MeshError("marking fraction must lie in (0, 1]")

    total = indicator.sum()
    identity = sp.identity(mesh.n_vertices, format="csr")
    if total == 0.0:
        return mesh, identity
    order = np.argsort(indicator, kind="stable")[::-1]
    csum = np.cumsum(indicator[order])
    n_marked = int(np.searchsorted(csum, fraction * total * (1.0 - 1e-12)) + 1)
    marked = order[:n_marked]

    nv = mesh.n_vertices
    keys, edge_nodes, t2e = _edge_table(mesh.triangles, nv)
    edge_marked = np.zeros(len(keys), dtype=bool)
    edge_marked[t2e[marked, 0]] = True

    # closure: a triangle with any marked edge must bisect its own edge
    while True:
        needs = edge_marked[t2e[:, 1]] | edge_marked[t2e[:, 2]]
        add = needs & ~edge_marked[t2e[:, 0]]
        if not add.any():
            break
        edge_marked[t2e[add, 0]] = True

    midpoint_of = np.full(len(keys), -1, dtype=np.int64)
    split_edges = np.flatnonzero(edge_marked)
    midpoint_of[split_edges] = nv + np.arange(len(split_edges))
    new_points = 0.5 * (
        mesh.vertices[edge_nodes[split_edges, 0]] + mesh.vertices[edge_nodes[split_edges, 1]]
    )
    vertices = np.vstack([mesh.vertices, new_points])

    tris = mesh.triangles
    m0 = midpoint_of[t2e[:, 0]]
    m1 = midpoint_of[t2e[:, 1]]
    m2 = midpoint_of[t2e[:, 2]]
    has0, has1, has2 = m0 >= 0, m1 >= 0, m2 >= 0

    chunks = []
    sel = ~has0
    chunks.append(tris[sel])
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]

    sel = has0 & ~has1 & ~has2
    chunks.append(np.column_stack([m0[sel], v0[sel], v1[sel]]))
    chunks.append(np.column_stack([m0[sel], v2[sel], v0[sel]]))

    sel = has0 & ~has1 & has2
    chunks.append(np.column_stack([m2[sel], m0[sel], v0[sel]]))
    chunks.append(np.column_stack([m2[sel], v1[sel], m0[sel]]))
    chunks.append(np.column_stack([m0[sel], v2[sel], v0[sel]]))

    sel = has0 & has1 & ~has2
    chunks.append(np.column_stack([m0[sel], v0[sel], v1[sel]]))
    chunks.append(np.column_stack([m1[sel], m0[sel], v2[sel]]))
    chunks.append(np.column_stack([m1[sel], v0[sel], m0[sel]]))

    sel = has0 & has1 & has2
    chunks.append(np.column_stack([m2[sel], m0[sel], v0[sel]]))
    chunks.append(np.column_stack([m2[sel], v1[sel], m0[sel]]))
    chunks.append(np.column_stack([m1[sel], m0[sel], v2[sel]]))
    chunks.append(np.column_stack([m1[sel], v0[sel], m0[sel]]))

    new_tris = np.vstack([c for c in chunks if len(c)])

    # split tagged boundary edges in place, keeping their tags
    b_keys = (
        mesh.boundary_edges.min(axis=1) * np.int64(nv) + mesh.boundary_edges.max(axis=1)
    )
    b_edge_idx = np.searchsorted(keys, b_keys)
    b_mid = midpoint_of[b_edge_idx]
    new_bedges, new_kinds, new_segments = [], [], []
    for (va, vb), kind, seg, mid in zip(
        mesh.boundary_edges, mesh.edge_kinds, mesh.edge_segments, b_mid
    ):
        if mid < 0:
            new_bedges.append((va, vb))
            new_kinds.append(kind)
            new_segments.append(seg)
        else:
            new_bedges.extend([(va, mid), (mid, vb)])
            new_kinds.extend([kind, kind])
            new_segments.extend([seg, seg])

    refined = TriMesh(
        vertices,
        new_tris,
        np.array(new_bedges, dtype=np.int64),
        np.array(new_kinds, dtype=np.int8),
        np.array(new_segments, dtype=np.int64),
    )
    _check_conforming(refined, "refine_by_indicator")
    if refined.max_diameter > mesh.max_diameter * (1.0 + 1e-12):
        raise MeshError("refinement increased the maximum triangle diameter")
    if abs(refined.areas.sum() - mesh.areas.sum()) > 1e-12 * mesh.areas.sum():
        raise MeshError("refinement changed the total area")

    rows = np.concatenate([np.arange(nv), np.repeat(np.arange(nv, len(vertices)), 2)])
    cols = np.concatenate([np.arange(nv), edge_nodes[split_edges].ravel()])
    data = np.concatenate([np.ones(nv), np.full(2 * len(split_edges), 0.5)])
    transfer = sp.csr_matrix((data, (rows, cols)), shape=(len(vertices), nv))

    logger.debug(
        "refined %d marked (of %d) triangles: %d -> %d",
        n_marked,
        mesh.n_triangles,
        mesh.n_triangles,
        refined.n_triangles,
    )
    return refined, transfer


# ---------------------------------------------------------------------------
# boundary traces


def square_boundary_param(points, tol=_GEOM_TOL):
    """Arclength parameter in [0, 8) along the perimeter of (-1,1)^2.

    Runs counterclockwise from the corner (-1,-1): bottom, right, top, left.
    """
    p = np.atleast_2d(points)
    x, y = p[:, 0], p[:, 1]
    off = np.abs(np.maximum(np.abs(x), np.abs(y)) - 1.0)
    if np.any(off > tol):
        worst = int(np.argmax(off))
        raise MeshError(
            "point (%.12g, %.12g) is not on the square boundary" % (x[worst], y[worst])
        )
    t = np.empty(len(p))
    done = np.zeros(len(p), dtype=bool)
    for mask, val in [
        (np.abs(y + 1.0) <= tol, lambda m: x[m] + 1.0),
        (np.abs(x - 1.0) <= tol, lambda m: 2.0 + y[m] + 1.0),
        (np.abs(y - 1.0) <= tol, lambda m: 4.0 + 1.0 - x[m]),
        (np.abs(x + 1.0) <= tol, lambda m: 6.0 + 1.0 - y[m]),
    ]:
        use = mask & ~done
        t[use] = val(use)
        done |= mask
    return t % BOUNDARY_PERIOD


@dataclass(frozen=True)
class BoundaryTrace:
    """Field values on the outer boundary, keyed by arclength parameter."""

    params: np.ndarray  # (n,) strictly increasing in [0, 8)
    values: np.ndarray  # (n, 2)

    def sample(self, t):
        t = np.asarray(t, dtype=float) % BOUNDARY_PERIOD
        out = np.empty((len(t), self.values.shape[1]))
        for k in range(self.values.shape[1]):
            out[:, k] = np.interp(t, self.params, self.values[:, k], period=BOUNDARY_PERIOD)
        return out


def extract_boundary_trace(mesh, values):
    """Trace of a nodal field on the outer boundary of the mesh."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    nodes = mesh.outer_boundary_vertices
    t = square_boundary_param(mesh.vertices[nodes])
    order = np.argsort(t)
    return BoundaryTrace(t[order], values[nodes][order])


def interpolate_boundary_trace(source_mesh, values, target_mesh):
    """Evaluate a source nodal field at the Neumann boundary nodes of target.

    Both meshes must share the outer square boundary. Returns the target
    Neumann vertex indices and the interpolated values there.
    """
    trace = extract_boundary_trace(source_mesh, values)
    nodes = target_mesh.neumann_vertices
    t = square_boundary_param(target_mesh.vertices[nodes])
    return nodes, trace.sample(t)
