"""Penalty paths and stability selection on top of a session.

Everything here is transport-blind: it drives whichever session it is
handed (in-process reference or protocol client) through the same
sequence of screens and solves, so results are directly comparable
across deployments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SolverError
from .screening import DiscardMask

RULE_EDPP = "edpp"
RULE_SAFE = "safe"
RULE_NONE = "none"
RULES = (RULE_EDPP, RULE_SAFE, RULE_NONE)

SPACING_LINEAR = "linear"
SPACING_GEOMETRIC = "geometric"
SPACINGS = (SPACING_LINEAR, SPACING_GEOMETRIC)


def build_path(
    num_points: int,
    max_ratio: float = 1.0,
    min_ratio: float = 0.05,
    spacing: str = SPACING_LINEAR,
) -> np.ndarray:
    """Grid of penalty ratios, descending from max_ratio to min_ratio.

    Geometric spacing keeps the relative step between neighbours
    constant, so warm starts stay equally good all the way down; on
    long paths into small ratios that is usually the better choice.
    """
    if num_points < 1:
        raise ConfigError(f"num_points must be >= 1, got {num_points}")
    if not 0.0 < min_ratio <= max_ratio <= 1.0:
        raise ConfigError(
            f"need 0 < min_ratio <= max_ratio <= 1, got {min_ratio}, {max_ratio}"
        )
    if spacing not in SPACINGS:
        raise ConfigError(f"unknown spacing {spacing!r}; pick one of {SPACINGS}")
    if num_points == 1:
        return np.array([max_ratio])
    if spacing == SPACING_GEOMETRIC:
        return np.geomspace(max_ratio, min_ratio, num_points)
    return np.linspace(max_ratio, min_ratio, num_points)


@dataclass
class PathPoint:
    index: int
    ratio: float
    lam: float
    n_kept: int
    n_discarded: int
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    solver_rounds: int

    @property
    def rejection_fraction(self) -> float:
        return self.n_discarded / (self.n_kept + self.n_discarded)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.x))


@dataclass
class PathResult:
    rule: str
    lambda_max: float
    p: int
    n_total: int
    ratios: np.ndarray
    points: list[PathPoint] = field(default_factory=list)
    point_seconds: list[float] = field(default_factory=list)
    traces: list[list] | None = None

    @property
    def total_seconds(self) -> float:
        return float(sum(self.point_seconds))

    def rejection_mean(self) -> float:
        return float(np.mean([pt.rejection_fraction for pt in self.points]))

    def objectives(self) -> np.ndarray:
        return np.array([pt.objective for pt in self.points])

    def support_union(self) -> np.ndarray:
        hit = np.zeros(self.p, dtype=bool)
        for pt in self.points:
            hit |= pt.x != 0.0
        return hit

    def coefficients(self) -> np.ndarray:
        return np.vstack([pt.x for pt in self.points])


def _validate_ratios(ratios: np.ndarray) -> np.ndarray:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or ratios.size == 0:
        raise ConfigError("ratios must be a non-empty 1-D array")
    if np.any(ratios <= 0.0) or np.any(ratios > 1.0):
        raise ConfigError("ratios must lie in (0, 1]")
    if ratios.size > 1 and np.any(np.diff(ratios) >= 0.0):
        raise ConfigError("ratios must be strictly decreasing")
    return ratios


def solve_path(
    session,
    ratios,
    rule: str = RULE_EDPP,
    collect_traces: bool = False,
) -> PathResult:
    """Solve the Lasso at every ratio * lambda_max down the grid.

    Screening (if any) for each point uses the solution at the previous
    grid point; solves warm-start from it, restricted to the kept set.
    The grid head ratio == 1.0 is a special case: the zero vector is
    the known solution at lambda_max, so nothing is screened or solved.
    """
    if rule not in RULES:
        raise ConfigError(f"unknown screening rule {rule!r}; pick one of {RULES}")
    ratios = _validate_ratios(ratios)
    result = PathResult(
        rule=rule,
        lambda_max=session.lambda_max,
        p=session.p,
        n_total=session.n_total,
        ratios=ratios,
        traces=[] if collect_traces else None,
    )
    lam_prev = session.lambda_max
    x_prev = np.zeros(session.p)
    for index, ratio in enumerate(ratios):
        started = time.perf_counter()
        lam = float(ratio) * session.lambda_max
        if lam == session.lambda_max:
            if rule == RULE_EDPP:
                mask = DiscardMask.discard_all(session.p)
            elif rule == RULE_SAFE:
                mask = session.safe_mask(lam)
            else:
                mask = DiscardMask.keep_all(session.p)
            point = PathPoint(
                index=index,
                ratio=float(ratio),
                lam=lam,
                n_kept=session.p - mask.n_discarded,
                n_discarded=mask.n_discarded,
                x=np.zeros(session.p),
                objective=0.5 * session.y_sq,
                kkt_residual=0.0,
                iterations=0,
                solver_rounds=0,
            )
            if collect_traces:
                result.traces.append([])
        else:
            if rule == RULE_EDPP:
                mask = session.edpp_mask(lam, lam_prev, x_prev)
            elif rule == RULE_SAFE:
                mask = session.safe_mask(lam)
            else:
                mask = DiscardMask.keep_all(session.p)
            if mask.n_discarded == mask.p:
                raise SolverError(
                    f"screening rejected every feature at lam={lam!r} < lambda_max; "
                    "this breaks the safety guarantee and indicates a bug"
                )
            session.set_mask(mask)
            trace = [] if collect_traces else None
            x_full, res = session.solve(lam, x0_full=x_prev, trace=trace)
            if collect_traces:
                result.traces.append(trace)
            point = PathPoint(
                index=index,
                ratio=float(ratio),
                lam=lam,
                n_kept=session.n_kept,
                n_discarded=mask.n_discarded,
                x=x_full,
                objective=res.objective,
                kkt_residual=res.kkt_residual,
                iterations=res.iterations,
                solver_rounds=res.rounds,
            )
            x_prev = x_full
            lam_prev = lam
        result.points.append(point)
        result.point_seconds.append(time.perf_counter() - started)
    return result


@dataclass
class StabilityResult:
    counts: np.ndarray
    n_rounds: int
    subsample_size: int
    base_seed: int
    p: int

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.n_rounds

    def ranking(self) -> np.ndarray:
        """Feature ids sorted by descending count; ties go to the lower id."""
        return np.lexsort((np.arange(self.p), -self.counts))

    def top(self, k: int) -> np.ndarray:
        return self.ranking()[:k]


def stability_select(
    session,
    ratios,
    n_rounds: int,
    subsample_size: int,
    base_seed: int = 0,
    rule: str = RULE_EDPP,
) -> StabilityResult:
    """Count, over seeded subject subsamples, how often each feature enters
    the path support anywhere on the grid.

    Every round re-derives lambda_max on its subsample, so the grid of
    ratios covers a comparable stretch of each round's own path.
    """
    if n_rounds < 1:
        raise ConfigError(f"n_rounds must be >= 1, got {n_rounds}")
    ratios = _validate_ratios(ratios)
    counts = np.zeros(session.p, dtype=np.int64)
    try:
        for round_index in range(n_rounds):
            session.set_subsample(base_seed, round_index, subsample_size)
            path = solve_path(session, ratios, rule=rule)
            counts += path.support_union()
    finally:
        session.clear_subsample()
    return StabilityResult(
        counts=counts,
        n_rounds=n_rounds,
        subsample_size=subsample_size,
        base_seed=base_seed,
        p=session.p,
    )
