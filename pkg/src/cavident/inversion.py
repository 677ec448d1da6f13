"""Cavity reconstruction driver.

Runs the semi-implicit phase-field flow: at each step, solve the forward
and adjoint problems for every load at the current iterate, then take one
box-constrained quadratic step. Stops when the update norm falls below the
configured tolerance. Meshes are refined on a fixed period, and the
regularization length epsilon can be tightened at a scheduled iteration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.csgraph import connected_components

from .elasticity import (
    elastic_operator,
    misfit,
    solve_adjoint,
    solve_forward,
    total_misfit,
)
from .fem import ElasticityParams, neumann_edge_mass
from .mesh import refine_by_indicator
from .phasefield import (
    PhaseField,
    StepMatrices,
    assemble_gradient_density,
    boundary_band_mask,
    build_step_problem,
    ginzburg_landau_energy,
    gradient_flow_step,
)

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised for inconsistent reconstruction settings."""


class ReconstructionError(Exception):
    """A reconstruction that failed mid-run; carries the partial history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class EpsilonSchedule:
    """Divide epsilon once a fixed iteration is reached."""

    switch_iteration: int
    divisor: float = 4.0

    def __post_init__(self):
        if self.switch_iteration < 0:
            raise ConfigError("epsilon switch iteration must not be negative")
        if self.divisor <= 1.0:
            raise ConfigError("epsilon divisor must exceed one")

    def value(self, iteration, epsilon0):
        return epsilon0 / self.divisor if iteration >= self.switch_iteration else epsilon0


@dataclass(frozen=True)
class RunConfig:
    """Everything a reconstruction run depends on."""

    mu: float = 0.2
    lam: float = 1.0
    delta: float = 1e-2
    alpha_tilde: float = 1e-2
    tau: float = 1e-3
    epsilon: float = 1.0 / (16.0 * np.pi)
    tol: float = 1e-5
    resolution: int = 32
    dirichlet_sides: Tuple[str, ...] = ("bottom",)
    d_band: float = 0.1
    refine_period: int = 1000
    refine_fraction: float = 0.5
    epsilon_schedule: Optional[EpsilonSchedule] = None
    max_iterations: int = 50000
    stop_norm: str = "l2"
    backtracking: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.dirichlet_sides, str):
            object.__setattr__(self, "dirichlet_sides", (self.dirichlet_sides,))
        else:
            object.__setattr__(self, "dirichlet_sides", tuple(self.dirichlet_sides))
        for name in ("alpha_tilde", "tau", "epsilon", "tol", "d_band"):
            if getattr(self, name) <= 0:
                raise ConfigError("%s must be positive" % name)
        if self.resolution < 2:
            raise ConfigError("resolution must be at least 2")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be positive")
        if self.refine_period < 0 or self.refine_fraction <= 0 or self.refine_fraction > 1:
            raise ConfigError("invalid refinement settings")
        if self.stop_norm not in ("l2", "max"):
            raise ConfigError("stop_norm must be 'l2' or 'max'")
        ElasticityParams(self.mu, self.lam, self.delta)  # validates the material
        if self.tau >= self.delta:
            logger.warning(
                "time step tau=%g is not below the ersatz factor delta=%g; "
                "monotone descent is not guaranteed",
                self.tau,
                self.delta,
            )

    @property
    def params(self):
        return ElasticityParams(self.mu, self.lam, self.delta)

    def to_dict(self):
        sched = None
        if self.epsilon_schedule is not None:
            sched = [self.epsilon_schedule.switch_iteration, self.epsilon_schedule.divisor]
        return {
            "mu": self.mu,
            "lam": self.lam,
            "delta": self.delta,
            "alpha_tilde": self.alpha_tilde,
            "tau": self.tau,
            "epsilon": self.epsilon,
            "tol": self.tol,
            "resolution": self.resolution,
            "dirichlet_sides": list(self.dirichlet_sides),
            "d_band": self.d_band,
            "refine_period": self.refine_period,
            "refine_fraction": self.refine_fraction,
            "epsilon_schedule": sched,
            "max_iterations": self.max_iterations,
            "stop_norm": self.stop_norm,
            "backtracking": self.backtracking,
            "seed": self.seed,
        }

    def hash(self):
        """Short stable digest; identical configs produce identical outputs."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    misfit: float
    regularization: float
    step_norm: float
    n_active_lower: int
    n_active_upper: int
    pdas_iterations: int
    n_vertices: int
    epsilon: float
    wall_time: float

    def to_dict(self, include_wall_time=False):
        d = {
            "iteration": self.iteration,
            "objective": self.objective,
            "misfit": self.misfit,
            "regularization": self.regularization,
            "step_norm": self.step_norm,
            "n_active_lower": self.n_active_lower,
            "n_active_upper": self.n_active_upper,
            "pdas_iterations": self.pdas_iterations,
            "n_vertices": self.n_vertices,
            "epsilon": self.epsilon,
        }
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class RunHistory:
    """Everything a finished (or aborted) run leaves behind."""

    config: RunConfig
    records: List[IterationRecord] = field(default_factory=list)
    refinements: List[dict] = field(default_factory=list)
    epsilon_events: List[dict] = field(default_factory=list)
    converged: bool = False
    final_phase: Optional[PhaseField] = None
    final_problem: Optional[object] = None

    @property
    def final_mesh(self):
        return None if self.final_phase is None else self.final_phase.mesh

    @property
    def iterations(self):
        return self.records[-1].iteration if self.records else 0

    def summary(self):
        """Deterministic digest of the run (no timing data)."""
        last = self.records[-1] if self.records else None
        return {
            "config_hash": self.config.hash(),
            "iterations": self.iterations,
            "converged": self.converged,
            "final_objective": None if last is None else last.objective,
            "final_misfit": None if last is None else last.misfit,
            "final_step_norm": None if last is None else last.step_norm,
            "n_vertices": None if last is None else last.n_vertices,
            "refinements": [e["iteration"] for e in self.refinements],
            "epsilon_events": [e["iteration"] for e in self.epsilon_events],
        }

    def write_jsonl(self, path):
        """One JSON line per iteration; timing is excluded so reruns of the
        same config overwrite the file with identical bytes."""
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def _step_indicator(mesh, values):
    """Per-triangle refinement indicator |grad v| * area."""
    from .fem import _hat_gradients

    b, c = _hat_gradients(mesh)
    vt = values[mesh.triangles]
    gx = np.einsum("ti,ti->t", b, vt)
    gy = np.einsum("ti,ti->t", c, vt)
    return np.hypot(gx, gy) * mesh.areas


def _update_norm(dv, matrices, kind):
    if kind == "max":
        return float(np.max(np.abs(dv))) if len(dv) else 0.0
    return float(np.sqrt(max(dv @ (matrices.mass @ dv), 0.0)))


def _objective_value(mesh, loads, values, params, matrices, edge_mass, alpha_tilde, eps):
    operator = elastic_operator(mesh, params, values)
    us = [solve_forward(mesh, params, g, operator=operator) for g in loads]
    mis = total_misfit(mesh, us, loads, edge_mass)
    return mis + ginzburg_landau_energy(values, matrices, alpha_tilde, eps)


def reconstruct(mesh, loads, config, on_iteration=None):
    """Run the reconstruction until the update norm drops below tol.

    loads is a sequence of LoadCase objects aligned with mesh. Returns a
    RunHistory whose final record restates the objective at the accepted
    iterate. Raises ReconstructionError (carrying the partial history) if a
    solve fails mid-run.
    """
    params = config.params
    history = RunHistory(config=config)
    v = PhaseField.zeros(mesh, config.d_band)
    matrices = StepMatrices.build(mesh)
    edge_mass = neumann_edge_mass(mesh)
    loads = list(loads)
    if not loads:
        raise ConfigError("at least one load case is required")
    want = (len(mesh.neumann_vertices), 2)
    for load in loads:
        if load.measurement.shape != want:
            raise ConfigError(
                "measurement for load %r has shape %s, expected %s"
                % (load.id, load.measurement.shape, want)
            )
    warm = None
    eps_prev = config.epsilon if config.epsilon_schedule is None else config.epsilon_schedule.value(1, config.epsilon)

    try:
        for n in range(1, config.max_iterations + 1):
            t0 = time.perf_counter()
            eps = config.epsilon
            if config.epsilon_schedule is not None:
                eps = config.epsilon_schedule.value(n, config.epsilon)
            if eps != eps_prev:
                history.epsilon_events.append(
                    {
                        "iteration": n,
                        "epsilon_old": eps_prev,
                        "epsilon_new": eps,
                        "regularization_old": ginzburg_landau_energy(
                            v, matrices, config.alpha_tilde, eps_prev
                        ),
                        "regularization_new": ginzburg_landau_energy(
                            v, matrices, config.alpha_tilde, eps
                        ),
                    }
                )
                logger.info("iteration %d: epsilon %g -> %g", n, eps_prev, eps)
            eps_prev = eps

            operator = elastic_operator(mesh, params, v.values)
            pairs = []
            for load in loads:
                u = solve_forward(mesh, params, load, operator=operator)
                p = solve_adjoint(mesh, params, load, u, operator=operator)
                pairs.append((u, p))
            mis = total_misfit(mesh, [u for u, _ in pairs], loads, edge_mass)
            reg = ginzburg_landau_energy(v, matrices, config.alpha_tilde, eps)
            if not np.isfinite(mis + reg):
                raise ReconstructionError(
                    "objective became non-finite at iteration %d" % n, history
                )

            v_next, state, problem = gradient_flow_step(
                v,
                pairs,
                params,
                tau=config.tau,
                alpha_tilde=config.alpha_tilde,
                epsilon=eps,
                matrices=matrices,
                warm_start=warm,
            )
            if config.backtracking:
                tau_try = config.tau
                for _ in range(5):
                    J_cand = _objective_value(
                        mesh, loads, v_next.values, params, matrices,
                        edge_mass, config.alpha_tilde, eps,
                    )
                    if J_cand <= mis + reg + 1e-12:
                        break
                    tau_try *= 0.5
                    logger.info(
                        "iteration %d: objective rose, retrying with tau=%g", n, tau_try
                    )
                    v_next, state, problem = gradient_flow_step(
                        v,
                        pairs,
                        params,
                        tau=tau_try,
                        alpha_tilde=config.alpha_tilde,
                        epsilon=eps,
                        matrices=matrices,
                        warm_start=state.active_sets,
                    )
            dv = v_next.values - v.values
            step_norm = _update_norm(dv, matrices, config.stop_norm)
            record = IterationRecord(
                iteration=n,
                objective=mis + reg,
                misfit=mis,
                regularization=reg,
                step_norm=step_norm,
                n_active_lower=int(state.lower.sum()),
                n_active_upper=int(state.upper.sum()),
                pdas_iterations=state.iterations,
                n_vertices=mesh.n_vertices,
                epsilon=eps,
                wall_time=time.perf_counter() - t0,
            )
            history.records.append(record)
            if on_iteration is not None:
                on_iteration(record, mesh, v_next)

            v = v_next
            warm = state.active_sets
            history.final_phase = v
            history.final_problem = problem

            if step_norm <= config.tol:
                history.converged = True
                t0 = time.perf_counter()
                operator = elastic_operator(mesh, params, v.values)
                us = [solve_forward(mesh, params, g, operator=operator) for g in loads]
                mis = total_misfit(mesh, us, loads, edge_mass)
                reg = ginzburg_landau_energy(v, matrices, config.alpha_tilde, eps)
                history.records.append(
                    IterationRecord(
                        iteration=n + 1,
                        objective=mis + reg,
                        misfit=mis,
                        regularization=reg,
                        step_norm=0.0,
                        n_active_lower=int(state.lower.sum()),
                        n_active_upper=int(state.upper.sum()),
                        pdas_iterations=0,
                        n_vertices=mesh.n_vertices,
                        epsilon=eps,
                        wall_time=time.perf_counter() - t0,
                    )
                )
                logger.info("converged after %d iterations", n)
                break

            if (
                config.refine_period
                and n % config.refine_period == 0
                and n < config.max_iterations
            ):
                old_mesh = mesh
                indicator = _step_indicator(mesh, v.values)
                mesh, transfer = refine_by_indicator(mesh, indicator, config.refine_fraction)
                if mesh is not old_mesh:
                    values = np.clip(transfer @ v.values, 0.0, 1.0)
                    frozen = boundary_band_mask(mesh, config.d_band)
                    values[frozen] = 0.0
                    v = PhaseField(mesh, values, frozen)
                    loads = [g.resampled(mesh, source_mesh=old_mesh) for g in loads]
                    matrices = StepMatrices.build(mesh)
                    edge_mass = neumann_edge_mass(mesh)
                    warm = None
                    history.refinements.append(
                        {
                            "iteration": n,
                            "n_vertices_before": old_mesh.n_vertices,
                            "n_vertices_after": mesh.n_vertices,
                            "n_triangles_after": mesh.n_triangles,
                        }
                    )
                    logger.info(
                        "iteration %d: refined mesh to %d vertices", n, mesh.n_vertices
                    )
    except Exception as exc:
        if isinstance(exc, ReconstructionError):
            raise
        raise ReconstructionError(str(exc), history) from exc

    return history


# ---------------------------------------------------------------------------
# objective helpers (used by tests and diagnostics)


def evaluate_objective(mesh, loads, values, config, matrices=None, edge_mass=None, epsilon=None):
    """Objective at an arbitrary nodal field: (total, misfit, regularization)."""
    params = config.params
    if matrices is None:
        matrices = StepMatrices.build(mesh)
    if edge_mass is None:
        edge_mass = neumann_edge_mass(mesh)
    eps = config.epsilon if epsilon is None else epsilon
    operator = elastic_operator(mesh, params, values)
    us = [solve_forward(mesh, params, g, operator=operator) for g in loads]
    mis = total_misfit(mesh, us, loads, edge_mass)
    reg = ginzburg_landau_energy(values, matrices, config.alpha_tilde, eps)
    return mis + reg, mis, reg


def objective_gradient(mesh, loads, values, config, matrices=None, epsilon=None):
    """Nodal gradient of the objective at the given field."""
    params = config.params
    if matrices is None:
        matrices = StepMatrices.build(mesh)
    eps = config.epsilon if epsilon is None else epsilon
    operator = elastic_operator(mesh, params, values)
    pairs = []
    for load in loads:
        u = solve_forward(mesh, params, load, operator=operator)
        p = solve_adjoint(mesh, params, load, u, operator=operator)
        pairs.append((u, p))
    G = assemble_gradient_density(mesh, params, pairs)
    reg_grad = config.alpha_tilde * (
        2.0 * eps * (matrices.stiffness @ values)
        + (matrices.mass @ (1.0 - 2.0 * values)) / eps
    )
    return G + reg_grad


# ---------------------------------------------------------------------------
# reconstruction quality


@dataclass(frozen=True)
class ThresholdMetrics:
    """Geometry of the thresholded reconstruction against a target shape."""

    empty: bool
    area: float
    centroid: Optional[np.ndarray]
    centroid_distance: float
    jaccard: float
    n_components: int


def threshold_and_compare(v, target, level=0.5):
    """Threshold the phase field at `level` and compare with the target.

    The reconstructed region collects the triangles whose mean nodal value
    exceeds the level. Overlap with the target is measured by triangle
    centroid membership, which is exact up to the mesh scale.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("threshold level must lie strictly between 0 and 1")
    mesh = v.mesh
    tri_vals = v.values[mesh.triangles].mean(axis=1)
    region = tri_vals > level
    if not region.any():
        return ThresholdMetrics(True, 0.0, None, np.inf, 0.0, 0)

    areas = mesh.areas[region]
    area = float(areas.sum())
    centroid = (areas[:, None] * mesh.centroids[region]).sum(axis=0) / area
    inside = target.contains(mesh.centroids[region])
    intersection = float(areas[inside].sum())
    union = area + target.area() - intersection
    jaccard = intersection / union if union > 0 else 0.0
    distance = float(np.linalg.norm(centroid - target.centroid()))

    adj = mesh.triangle_adjacency().tocsr()[region][:, region]
    n_comp, _ = connected_components(adj, directed=False)
    return ThresholdMetrics(False, area, centroid, distance, jaccard, int(n_comp))
