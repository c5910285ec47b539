"""Exception hierarchy and process exit codes."""


class FedLassoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedLassoError):
    """Invalid or inconsistent configuration (shapes, ranges, flags)."""


class ProtocolError(FedLassoError):
    """A query round failed: missing/duplicate reply, bad frame, timeout."""


class DegenerateProblemError(FedLassoError):
    """The problem has no meaningful Lasso solution (e.g. A^T y == 0)."""


class SolverError(FedLassoError):
    """Solver failed to produce an acceptable solution."""


class StepSizeError(SolverError):
    """Objective diverged; the fixed step size is too large.

    Retry with step_rule="backtracking".
    """


class ConvergenceError(SolverError):
    """Iteration budget exhausted before reaching the KKT tolerance."""


class OracleError(FedLassoError):
    """The test-only reference solver failed to converge."""


class DataError(FedLassoError):
    """Dataset synthesis/QC/partition failure (empty dataset, bad shard)."""


# CLI exit codes (0 = success).
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_SOLVER = 4
EXIT_IO = 5
