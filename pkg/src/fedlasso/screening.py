"""Safe feature screening for the L1 path.

Two rules are implemented, both exact: a feature they discard is
guaranteed to be zero in every optimum at that penalty, so solving the
reduced problem loses nothing.

* `safe_screen` is the static ball test. It needs only quantities the
  center already holds after session setup (feature/response
  correlations, column norms, the response norm), so it costs no
  communication at all.
* The dual-projection rule is much tighter. It screens at lam_k using
  the solution at the previous path point lam_prev. All of its vector
  geometry lives in row space and therefore stays sharded: every
  institution evaluates its slice of the dual point and the two
  projection vectors, and only p-length column products and a handful
  of scalars are ever aggregated. The per-shard pieces are plain
  functions here so the in-process reference and the networked workers
  run literally the same arithmetic.

Both rules use a strict `<`, so boundary features are kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateProblemError
from .linalg import (
    FeatureShard,
    ResponseShard,
    SparseVector,
    check_paired,
    matvec,
    sum_in_order,
)


@dataclass(frozen=True)
class DiscardMask:
    """Boolean verdict per feature; True means screened out."""

    discarded: np.ndarray

    def __post_init__(self):
        d = np.array(self.discarded, dtype=bool, copy=True)
        if d.ndim != 1:
            raise ConfigError(f"mask must be 1-D, got shape {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "discarded", d)

    @property
    def p(self) -> int:
        return int(self.discarded.shape[0])

    @property
    def n_discarded(self) -> int:
        return int(np.count_nonzero(self.discarded))

    @property
    def rejection_fraction(self) -> float:
        return self.n_discarded / self.p

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.discarded)

    @classmethod
    def keep_all(cls, p: int) -> "DiscardMask":
        return cls(np.zeros(p, dtype=bool))

    @classmethod
    def discard_all(cls, p: int) -> "DiscardMask":
        return cls(np.ones(p, dtype=bool))

    def to_floats(self) -> np.ndarray:
        """Run-length encode into float64 for the wire: [p, first, runs...]."""
        d = self.discarded
        if d.size == 0:
            return np.array([0.0, 0.0])
        edges = np.flatnonzero(d[1:] != d[:-1]) + 1
        bounds = np.concatenate(([0], edges, [d.size]))
        runs = np.diff(bounds).astype(np.float64)
        return np.concatenate(([float(d.size), 1.0 if d[0] else 0.0], runs))

    @classmethod
    def from_floats(cls, payload: np.ndarray) -> "DiscardMask":
        payload = np.asarray(payload, dtype=np.float64)
        if payload.size < 2:
            raise ConfigError("mask payload too short")
        p = int(payload[0])
        value = bool(payload[1])
        runs = payload[2:].astype(np.int64)
        if runs.sum() != p or (runs.size and runs.min() <= 0):
            raise ConfigError("mask payload runs are inconsistent")
        out = np.empty(p, dtype=bool)
        pos = 0
        for run in runs:
            out[pos : pos + run] = value
            pos += run
            value = not value
        return cls(out)


def lambda_max_from_correlations(correlations: np.ndarray) -> tuple[float, int]:
    """Smallest penalty with all-zero solution, and the first column attaining it.

    lambda_max = max_j |[A^T y]_j|. Ties break to the lowest index.
    """
    magnitudes = np.abs(correlations)
    lam_max = float(np.max(magnitudes))
    if lam_max == 0.0:
        raise DegenerateProblemError(
            "A^T y is identically zero; every penalty gives the zero solution"
        )
    return lam_max, int(np.argmax(magnitudes))


def safe_screen(
    correlations: np.ndarray,
    col_sq: np.ndarray,
    y_norm: float,
    lam: float,
    lambda_max: float,
) -> DiscardMask:
    """Static ball test: discard j when |[A^T y]_j| provably stays under lam.

    Discard j  iff  |[A^T y]_j| < lam - ||a_j|| * ||y|| * (lambda_max - lam) / lambda_max.
    """
    _check_lam(lam, lambda_max)
    slack = np.sqrt(col_sq) * y_norm * ((lambda_max - lam) / lambda_max)
    return DiscardMask(np.abs(correlations) < lam - slack)


# --- dual-projection rule: per-shard pieces ---------------------------------


def dual_slice(
    shard: FeatureShard,
    response: ResponseShard,
    lam_prev: float,
    lambda_max: float,
    x_prev: np.ndarray | None,
    first: bool,
) -> np.ndarray:
    """This institution's slice of the dual point at lam_prev.

    At the path start (lam_prev == lambda_max) the dual point is y / lambda_max;
    afterwards it is the scaled residual (y - A x*(lam_prev)) / lam_prev.
    """
    check_paired(shard, response)
    if first:
        return response.values / lambda_max
    if x_prev is None:
        raise ConfigError("x_prev is required when lam_prev < lambda_max")
    if not isinstance(x_prev, SparseVector):
        # Path solutions are sparse; multiplying only the nonzero columns
        # turns an O(n p) product into O(n nnz).
        x_prev = SparseVector.from_dense(x_prev)
    return (response.values - matvec(shard, x_prev)) / lam_prev


def v1_slice(
    shard: FeatureShard,
    response: ResponseShard,
    theta: np.ndarray,
    lam_prev: float,
    lambda_max: float,
    argmax_col: int,
    argmax_sign: float,
    first: bool,
) -> np.ndarray:
    """Slice of the first projection direction (along the dual path)."""
    if first:
        return argmax_sign * shard.column(argmax_col)
    return response.values / lam_prev - theta


def v2_slice(response: ResponseShard, theta: np.ndarray, lam_k: float) -> np.ndarray:
    """Slice of the second direction, pointing from the dual point at lam_prev
    toward the naive estimate y / lam_k."""
    return response.values / lam_k - theta


def sp_partial(v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Shard contribution to [ ||v1||^2, <v1, v2> ]."""
    return np.array([float(v1 @ v1), float(v1 @ v2)])


def wv_partial(
    shard: FeatureShard, theta: np.ndarray, v1: np.ndarray, v2: np.ndarray, ratio: float
) -> np.ndarray:
    """Shard contribution to [ w_1..w_p, ||v2_perp||^2 ].

    v2_perp is v2 minus its component along v1; the mixing ratio
    <v1, v2> / ||v1||^2 is a global scalar the center supplies.
    w_j sums column inner products with (theta + v2_perp / 2).
    """
    v2_perp = v2 - ratio * v1
    probe = theta + 0.5 * v2_perp
    w = shard.values.T @ probe
    return np.concatenate((w, [float(v2_perp @ v2_perp)]))


def projection_mask(w: np.ndarray, v2_perp_sq: float, col_sq: np.ndarray) -> DiscardMask:
    """Center-side verdict: discard j iff |w_j| < 1 - 0.5 * ||v2_perp|| * ||a_j||."""
    if v2_perp_sq < 0.0:
        v2_perp_sq = 0.0
    threshold = 1.0 - 0.5 * np.sqrt(v2_perp_sq) * np.sqrt(col_sq)
    return DiscardMask(np.abs(w) < threshold)


def mixing_ratio(s: float, p_dot: float) -> float:
    """<v1,v2>/||v1||^2, defined as 0 when v1 vanishes (projection is a no-op)."""
    return 0.0 if s == 0.0 else p_dot / s


# --- dual-projection rule: assembled reference ------------------------------


def edpp_screen_blocks(
    shards: list[FeatureShard],
    responses: list[ResponseShard],
    order: list[int],
    lam_k: float,
    lam_prev: float,
    lambda_max: float,
    argmax_col: int,
    argmax_sign: float,
    x_prev: np.ndarray | None,
    col_sq: np.ndarray,
) -> DiscardMask:
    """Dual-projection screen over in-process shards.

    Mirrors the networked version exactly: per-shard slices via the
    functions above, cross-shard sums in the given institution order.
    """
    check_screen_interval(lam_k, lam_prev, lambda_max)
    first = lam_prev == lambda_max
    by_id = {s.shard_id: (s, r) for s, r in zip(shards, responses)}

    slices = {}
    sp_parts = {}
    for wid in order:
        shard, response = by_id[wid]
        theta = dual_slice(shard, response, lam_prev, lambda_max, x_prev, first)
        v1 = v1_slice(shard, response, theta, lam_prev, lambda_max, argmax_col, argmax_sign, first)
        v2 = v2_slice(response, theta, lam_k)
        slices[wid] = (theta, v1, v2)
        sp_parts[wid] = sp_partial(v1, v2)
    s, p_dot = sum_in_order(sp_parts, order)
    ratio = mixing_ratio(float(s), float(p_dot))

    wv_parts = {
        wid: wv_partial(by_id[wid][0], theta, v1, v2, ratio)
        for wid, (theta, v1, v2) in slices.items()
    }
    wv = sum_in_order(wv_parts, order)
    return projection_mask(wv[:-1], float(wv[-1]), col_sq)


def _check_lam(lam: float, lambda_max: float) -> None:
    if not 0.0 < lam <= lambda_max:
        raise ConfigError(f"lam must be in (0, lambda_max={lambda_max!r}], got {lam!r}")


def check_screen_interval(lam_k: float, lam_prev: float, lambda_max: float) -> None:
    _check_lam(lam_k, lambda_max)
    _check_lam(lam_prev, lambda_max)
    if lam_k >= lam_prev:
        raise ConfigError(
            f"screening runs down the path: need lam_k < lam_prev, "
            f"got {lam_k!r} >= {lam_prev!r}"
        )
