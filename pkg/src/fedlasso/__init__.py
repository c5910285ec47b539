"""L1-regularized regression over horizontally partitioned cohorts.

Institutions keep their subject rows; an aggregation center drives
screening, solving, and stability selection through sum-only query
rounds. A centralized in-process reference reproduces every distributed
result bit for bit, which is how the protocol stays verifiable.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateProblemError,
    FedLassoError,
    OracleError,
    ProtocolError,
    SolverError,
    StepSizeError,
)
from .federated import CentralizedSession, FederatedSession
from .linalg import FeatureShard, ResponseShard, SparseVector, assemble
from .pipeline import (
    PathPoint,
    PathResult,
    StabilityResult,
    build_path,
    solve_path,
    stability_select,
)
from .protocol import (
    Federation,
    Frame,
    Kind,
    LocalTransport,
    SocketTransport,
    Transcript,
    privacy_audit,
    serve_worker,
)
from .screening import DiscardMask, lambda_max_from_correlations, safe_screen
from .solver import (
    SolveResult,
    SolverConfig,
    estimate_lipschitz,
    fista_solve,
    kkt_residual_from_gradient,
    reference_solve,
    soft_threshold,
)
from .worker import WorkerRuntime

__version__ = "0.1.0"

__all__ = [
    "CentralizedSession",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "DegenerateProblemError",
    "DiscardMask",
    "FedLassoError",
    "FeatureShard",
    "FederatedSession",
    "Federation",
    "Frame",
    "Kind",
    "LocalTransport",
    "OracleError",
    "PathPoint",
    "PathResult",
    "ProtocolError",
    "ResponseShard",
    "SocketTransport",
    "SolveResult",
    "SolverConfig",
    "SolverError",
    "SparseVector",
    "StabilityResult",
    "StepSizeError",
    "Transcript",
    "WorkerRuntime",
    "assemble",
    "build_path",
    "estimate_lipschitz",
    "fista_solve",
    "kkt_residual_from_gradient",
    "lambda_max_from_correlations",
    "privacy_audit",
    "reference_solve",
    "safe_screen",
    "serve_worker",
    "soft_threshold",
    "solve_path",
    "stability_select",
]
