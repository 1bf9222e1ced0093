"""Recover the zero-order coefficient of a 2-D heat equation from boundary data.

The package simulates the forward problem (a heat equation with an unknown
reaction/perfusion term c(x) and Dirichlet boundary data), extracts lateral
Cauchy data on an inner square, compresses the time dependence in a special
orthonormal basis, and reconstructs c(x) by a predictor-corrector sweep of
regularized least-squares solves of the resulting coupled elliptic system.
"""

from .time_basis import (
    TimeGrid,
    QuadRule,
    TimeBasis,
    build_basis,
    build_raw_functions,
    composite_gauss_rule,
    orthonormalize,
)
from .forward_sim import (
    SpaceGrid,
    BoundaryTimeSeries,
    solve_forward,
    extract_cauchy,
    boundary_nodes,
    apply_laplacian,
)
from .fourier_data import (
    FourierBoundaryData,
    project,
    project_series,
    project_rate,
    add_noise,
)
from .elliptic_system import (
    IndexMap,
    OperatorBlocks,
    build_blocks,
    assemble_linear,
    assemble_nonlinear,
)
from .qrm_solver import (
    QrmProblem,
    QrmSolution,
    QrmIterationError,
    StructuredFactor,
    StructuredFactorError,
    build_structured_factor,
    get_structured_factor,
    evaluate_functional,
    solve_blocks,
)
from .inversion import (
    ReconstructionConfig,
    ReconstructionResult,
    extract_coefficient,
    reconstruct,
)
from .harness import (
    RunConfig,
    RunReport,
    get_case,
    list_cases,
    run_pipeline,
    truncation_study,
    compute_metrics,
)

__version__ = "0.1.0"

__all__ = [
    "TimeGrid",
    "QuadRule",
    "TimeBasis",
    "build_basis",
    "build_raw_functions",
    "composite_gauss_rule",
    "orthonormalize",
    "SpaceGrid",
    "BoundaryTimeSeries",
    "solve_forward",
    "extract_cauchy",
    "boundary_nodes",
    "apply_laplacian",
    "FourierBoundaryData",
    "project",
    "project_series",
    "project_rate",
    "add_noise",
    "IndexMap",
    "OperatorBlocks",
    "build_blocks",
    "assemble_linear",
    "assemble_nonlinear",
    "QrmProblem",
    "QrmSolution",
    "QrmIterationError",
    "StructuredFactor",
    "StructuredFactorError",
    "build_structured_factor",
    "get_structured_factor",
    "evaluate_functional",
    "solve_blocks",
    "ReconstructionConfig",
    "ReconstructionResult",
    "extract_coefficient",
    "reconstruct",
    "RunConfig",
    "RunReport",
    "get_case",
    "list_cases",
    "run_pipeline",
    "truncation_study",
    "compute_metrics",
    "__version__",
]
