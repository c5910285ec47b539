"""Accelerated proximal solver for L1-regularized least squares.

The objective is

    F(x) = 0.5 * ||A x - y||_2^2 + lam * ||x||_1

with A and y split row-wise across institutions. The iteration logic is
written against a small gradient-source interface, so the exact same
code drives both the in-process reference (shard partials summed
locally in institution order) and the networked deployment (partials
summed by the aggregation protocol in the same order). With matching
summation order the two produce bit-identical iterates.

`reference_solve` is an independent check: cyclic coordinate descent on
the assembled dense matrix, sharing no code with the proximal path. The
test suite uses it as the ground-truth oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ConfigError, ConvergenceError, OracleError, SolverError, StepSizeError

STEP_FIXED = "fixed"
STEP_BACKTRACKING = "backtracking"
_EPS = float(np.finfo(np.float64).eps)


def soft_threshold(v: np.ndarray, alpha: float) -> np.ndarray:
    """Proximal operator of alpha * ||.||_1: sign(v) * max(|v| - alpha, 0)."""
    return np.sign(v) * np.maximum(np.abs(v) - alpha, 0.0)


def kkt_residual_from_gradient(grad: np.ndarray, x: np.ndarray, lam: float) -> float:
    """Max violation of the stationarity conditions, given grad = A^T(Ax - y).

    With c = A^T(y - Ax) / lam = -grad / lam, optimality requires
    c_j == sign(x_j) on the support and |c_j| <= 1 off it.
    """
    if lam <= 0.0:
        raise ConfigError(f"lam must be positive, got {lam}")
    c = -grad / lam
    on = np.abs(c - np.sign(x))
    off = np.maximum(np.abs(c) - 1.0, 0.0)
    return float(np.max(np.where(x != 0.0, on, off)))


def lasso_objective_value(rss: float, l1_norm: float, lam: float) -> float:
    return 0.5 * rss + lam * l1_norm


class GradientSource(Protocol):
    """Whatever can evaluate the aggregated smooth part of the objective."""

    @property
    def dim(self) -> int:
        """Number of features the source currently exposes."""

    def gradient(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        """Return (sum_i A_i^T (A_i x - y_i), sum_i ||A_i x - y_i||^2)."""

    def loss(self, x: np.ndarray) -> float:
        """Return 0.5 * sum_i ||A_i x - y_i||^2 (used by backtracking only)."""


@dataclass
class SolverConfig:
    max_iters: int = 50_000
    tolerance: float = 1e-8
    step_rule: str = STEP_FIXED
    check_every: int = 25
    divergence_factor: float = 1e6
    adaptive_restart: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance <= 0:
            raise ConfigError(f"tolerance must be positive, got {self.tolerance}")
        if self.step_rule not in (STEP_FIXED, STEP_BACKTRACKING):
            raise ConfigError(f"unknown step_rule {self.step_rule!r}")
        if self.check_every < 1:
            raise ConfigError(f"check_every must be >= 1, got {self.check_every}")


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    rounds: int
    step_size: float
    converged: bool


def fista_solve(
    source: GradientSource,
    lam: float,
    step_size: float,
    config: SolverConfig | None = None,
    x0: np.ndarray | None = None,
    trace: list | None = None,
) -> SolveResult:
    """Minimize 0.5||Ax - y||^2 + lam||x||_1 by accelerated proximal descent.

    Each iteration takes one gradient evaluation at the extrapolated
    point, a soft-threshold step, and a momentum update

        t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2
        x^{k+1} = z^k + ((t_k - 1) / t_{k+1}) (z^k - z^{k-1})

    starting from t_1 = 1 and z^0 = x^0. The proximal iterate z is the
    solution estimate. Convergence is declared when the stationarity
    residual at z drops to config.tolerance; that needs a gradient at z
    (one extra evaluation), so the check runs every config.check_every
    iterations or as soon as a free prox-step bound says it could pass.

    With adaptive_restart on, the momentum weight resets to 1 whenever
    the gradient makes an obtuse angle with the last move (the iterates
    would overshoot); this never changes what the method converges to,
    only how fast, and turning it off recovers the plain t-sequence.

    If trace is a list, a copy of every z^k is appended to it.
    """
    config = config or SolverConfig()
    if lam <= 0.0:
        raise ConfigError(f"lam must be positive, got {lam}")
    if step_size <= 0.0:
        raise ConfigError(f"step_size must be positive, got {step_size}")
    p = source.dim
    if p == 0:
        raise ConfigError("cannot solve over zero features; screen before solving")
    z_prev = np.zeros(p) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    if z_prev.shape != (p,):
        raise ConfigError(f"x0 has shape {z_prev.shape}, expected ({p},)")

    step = step_size
    t = 1.0
    x = z_prev
    rounds = 0
    grad, rss = source.gradient(x)
    rounds += 1
    rss_scale = rss + 1.0
    last_kkt = math.inf
    backtracking = config.step_rule == STEP_BACKTRACKING

    for k in range(1, config.max_iters + 1):
        if not math.isfinite(rss) or rss > config.divergence_factor * rss_scale:
            raise StepSizeError(
                f"objective diverged at iteration {k} (rss={rss!r}); "
                f"step size {step!r} is too large"
            )
        if backtracking:
            gx = 0.5 * rss
            while True:
                z = soft_threshold(x - step * grad, lam * step)
                d = z - x
                gz = source.loss(z)
                rounds += 1
                # Slack at the rounding scale of the compared values: near
                # the optimum both sides agree to machine precision and a
                # strict test would halve the step forever on noise.
                slack = 16.0 * _EPS * max(abs(gx), abs(gz), 1.0)
                if gz <= gx + float(grad @ d) + float(d @ d) / (2.0 * step) + slack:
                    break
                step *= 0.5
                if step <= 0.0 or not math.isfinite(step):
                    raise StepSizeError("backtracking reduced the step size to zero")
        else:
            z = soft_threshold(x - step * grad, lam * step)
        if trace is not None:
            trace.append(z.copy())

        # The prox step bounds the stationarity residual at z without an
        # extra gradient: ||(x-z)/step|| + ||grad(x)-grad(z)|| <= 2||z-x||/step
        # (step <= 1/L). The real check still decides; this schedules it.
        predicted = 2.0 * float(np.linalg.norm(z - x)) / (step * lam)
        if predicted <= config.tolerance or k % config.check_every == 0 or k == config.max_iters:
            gz_vec, rss_z = source.gradient(z)
            rounds += 1
            last_kkt = kkt_residual_from_gradient(gz_vec, z, lam)
            if last_kkt <= config.tolerance:
                obj = lasso_objective_value(rss_z, float(np.sum(np.abs(z))), lam)
                return SolveResult(z, obj, last_kkt, k, rounds, step, True)

        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        if config.adaptive_restart and float(grad @ (z - z_prev)) > 0.0:
            t_next = 1.0
            x = z
        else:
            x = z + ((t - 1.0) / t_next) * (z - z_prev)
        z_prev = z
        t = t_next
        grad, rss = source.gradient(x)
        rounds += 1

    gz_vec, rss_z = source.gradient(z_prev)
    rounds += 1
    last_kkt = kkt_residual_from_gradient(gz_vec, z_prev, lam)
    obj = lasso_objective_value(rss_z, float(np.sum(np.abs(z_prev))), lam)
    err = ConvergenceError(
        f"no convergence after {config.max_iters} iterations "
        f"(stationarity residual {last_kkt:.3e} > tolerance {config.tolerance:.3e})"
    )
    err.result = SolveResult(z_prev, obj, last_kkt, config.max_iters, rounds, step, False)
    raise err


def estimate_lipschitz(
    source: GradientSource,
    correlations: np.ndarray,
    iters: int = 50,
    seed: int = 0,
    safety: float = 1.05,
) -> float:
    """Upper-bound the largest eigenvalue of A^T A by power iteration.

    The source only exposes gradients, but A^T A u = gradient(u) + A^T y,
    so the caller passes the aggregated correlations A^T y once and each
    power step costs a single gradient evaluation.
    """
    p = correlations.shape[0]
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(p)
    u /= float(np.linalg.norm(u))
    est = 0.0
    for _ in range(iters):
        w = source.gradient(u)[0] + correlations
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            u = rng.standard_normal(p)
            nu = float(np.linalg.norm(u))
            if nu == 0.0:
                raise SolverError("power iteration collapsed to the zero vector")
            u /= nu
            continue
        est = norm
        u = w / norm
    if est <= 0.0:
        raise SolverError("could not find a positive curvature estimate; is A zero?")
    return safety * est


# --- independent dense reference (test oracle) ------------------------------

_CD_KERNEL = None


def _cd_kernel():
    global _CD_KERNEL
    if _CD_KERNEL is None:
        from numba import njit

        @njit(cache=True)
        def cd_sweeps(A, y, lam, tol, max_sweeps, x):
            n, p = A.shape
            col_sq = np.zeros(p)
            for j in range(p):
                s = 0.0
                for i in range(n):
                    s += A[i, j] * A[i, j]
                col_sq[j] = s
            r = y.copy()
            for j in range(p):
                if x[j] != 0.0:
                    for i in range(n):
                        r[i] -= A[i, j] * x[j]
            for sweep in range(max_sweeps):
                for j in range(p):
                    if col_sq[j] == 0.0:
                        continue
                    dot = 0.0
                    for i in range(n):
                        dot += A[i, j] * r[i]
                    rho = dot + col_sq[j] * x[j]
                    if rho > lam:
                        new = (rho - lam) / col_sq[j]
                    elif rho < -lam:
                        new = (rho + lam) / col_sq[j]
                    else:
                        new = 0.0
                    if new != x[j]:
                        diff = new - x[j]
                        for i in range(n):
                            r[i] -= A[i, j] * diff
                        x[j] = new
                worst = 0.0
                for j in range(p):
                    dot = 0.0
                    for i in range(n):
                        dot += A[i, j] * r[i]
                    c = dot / lam
                    if x[j] > 0.0:
                        err = abs(c - 1.0)
                    elif x[j] < 0.0:
                        err = abs(c + 1.0)
                    else:
                        err = abs(c) - 1.0
                        if err < 0.0:
                            err = 0.0
                    if err > worst:
                        worst = err
                if worst <= tol:
                    return sweep + 1
            return -1

        _CD_KERNEL = cd_sweeps
    return _CD_KERNEL


def reference_solve(
    A: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float = 1e-10,
    max_sweeps: int = 1_000_000,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Cyclic coordinate descent on the assembled dense problem.

    Deliberately shares no code with the proximal solver; the tests use
    it as an independent oracle. Raises OracleError if the sweep budget
    runs out before the stationarity residual reaches tol.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if A.ndim != 2 or y.ndim != 1 or A.shape[0] != y.shape[0]:
        raise ConfigError(f"bad oracle shapes: A {A.shape}, y {y.shape}")
    if lam <= 0.0:
        raise ConfigError(f"lam must be positive, got {lam}")
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    sweeps = _cd_kernel()(A, y, lam, tol, max_sweeps, x)
    if sweeps < 0:
        raise OracleError(f"reference solver: no convergence in {max_sweeps} sweeps")
    return x
