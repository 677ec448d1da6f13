"""Reconstruction of cavities in a linearly elastic body from boundary
displacement measurements, by phase-field relaxation of the unknown
geometry."""

from .elasticity import (
    LoadCase,
    misfit,
    solve_adjoint,
    solve_forward,
    solve_true_cavity,
    total_misfit,
)
from .fem import DisplacementField, ElasticityParams, SolveError
from .inversion import (
    EpsilonSchedule,
    IterationRecord,
    ReconstructionError,
    RunConfig,
    RunHistory,
    ThresholdMetrics,
    reconstruct,
    threshold_and_compare,
)
from .mesh import (
    AxisSquare,
    BoundaryTrace,
    Disk,
    EdgeKind,
    MeshError,
    Polygon,
    ShapeUnion,
    TriMesh,
    build_square_mesh,
    carve_cavity,
    extract_boundary_trace,
    interpolate_boundary_trace,
    refine_by_indicator,
    square_boundary_param,
)
from .phasefield import (
    ObstacleProblem,
    PDASError,
    PDASState,
    PhaseField,
    StepMatrices,
    ginzburg_landau_energy,
    gradient_flow_step,
    pdas_solve,
)
from .presets import (
    PRESETS,
    ExperimentPreset,
    TractionParseError,
    get_preset,
    parse_traction_expression,
    preset_table,
)
from .synth import NoiseSpec, add_noise, generate_measurements, read_measurement, write_measurement

__version__ = "0.1.0"

__all__ = [
    "AxisSquare",
    "BoundaryTrace",
    "Disk",
    "DisplacementField",
    "EdgeKind",
    "ElasticityParams",
    "EpsilonSchedule",
    "ExperimentPreset",
    "IterationRecord",
    "LoadCase",
    "MeshError",
    "NoiseSpec",
    "ObstacleProblem",
    "PDASError",
    "PDASState",
    "PRESETS",
    "PhaseField",
    "Polygon",
    "ReconstructionError",
    "RunConfig",
    "RunHistory",
    "ShapeUnion",
    "SolveError",
    "StepMatrices",
    "ThresholdMetrics",
    "TractionParseError",
    "TriMesh",
    "add_noise",
    "build_square_mesh",
    "carve_cavity",
    "extract_boundary_trace",
    "generate_measurements",
    "get_preset",
    "ginzburg_landau_energy",
    "gradient_flow_step",
    "interpolate_boundary_trace",
    "misfit",
    "parse_traction_expression",
    "pdas_solve",
    "preset_table",
    "read_measurement",
    "reconstruct",
    "refine_by_indicator",
    "solve_adjoint",
    "solve_forward",
    "solve_true_cavity",
    "square_boundary_param",
    "threshold_and_compare",
    "total_misfit",
    "write_measurement",
]
