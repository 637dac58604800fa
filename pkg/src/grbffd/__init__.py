"""Laplace-Beltrami operators on point clouds by GMLS, RBF-FD and gRBF-FD.

The pipeline is: sample a manifold (:mod:`.manifolds`), build nearest-neighbour
stencils in tangent coordinates (:mod:`.stencils`), compute per-stencil
Laplacian weights with optional stencil-size tuning (:mod:`.local_ops`),
assemble and solve the screened Poisson problem (:mod:`.assembly`) and check
the results (:mod:`.verification`).
"""
from .assembly import (
    NormEstimate,
    ScreenedSystem,
    SolveReport,
    SparseOperator,
    assemble,
    export_matrix_market,
    forward_error,
    inf_norm_inverse,
    inverse_error,
    leading_eigenvalues,
    row_sums,
    solve_screened_poisson,
)
from .exceptions import (
    ConfigurationError,
    DegenerateStencilError,
    GrbffdError,
    OracleUndefinedError,
    RankDeficiencyError,
    SolverError,
    UnsupportedModeError,
)
from .local_ops import (
    LaplacianRow,
    MethodConfig,
    auto_tune_row,
    gmls_weights,
    grbffd_weights,
    monomial_indices,
    phs_correction_weights,
    rbffd_weights,
    spike_ratio,
    stencil_weights,
    tune_rows,
    two_step_weights,
    weight_matrix,
)
from .manifolds import BUILTIN_NAMES, ManifoldSpec, PointCloud, builtin_spec, cloud_from_params, sample_points
from .stencils import NeighborIndex, Stencil, build_knn_index, knn, monge_project, stencil_from_theta
from .verification import (
    convergence_sweep,
    diameter_statistics,
    fd_laplacian_oracle,
    fit_slope,
    regularization_sweep,
    reproduction_suite,
    run_trial,
)

__version__ = "0.1.0"
