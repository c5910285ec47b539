"""Shard-local linear algebra.

Everything an institution computes from its own (A_i, y_i) before
aggregation lives here: partial gradients, per-column squared norms,
single-column inner products. Shards are immutable float64 arrays in
column-major (Fortran) order, because screening and gradient kernels
walk columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def _frozen_f64(values: np.ndarray, order: str = "F") -> np.ndarray:
    out = np.array(values, dtype=np.float64, order=order, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FeatureShard:
    """One institution's design-matrix block A_i (n_i subjects x p features)."""

    values: np.ndarray
    shard_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ConfigError(f"feature shard must be 2-D, got shape {v.shape}")
        if v.shape[1] == 0:
            raise ConfigError("feature shard must have at least one column")
        object.__setattr__(self, "values", _frozen_f64(v))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        if not 0 <= j < self.cols:
            raise ConfigError(f"column index {j} out of range for p={self.cols}")
        return self.values[:, j]

    def take_columns(self, kept: np.ndarray) -> "FeatureShard":
        """Column-subset copy (discarded columns are simply not copied)."""
        return FeatureShard(self.values[:, kept], shard_id=self.shard_id)

    def take_rows(self, rows: np.ndarray) -> "FeatureShard":
        return FeatureShard(self.values[rows, :], shard_id=self.shard_id)


@dataclass(frozen=True)
class ResponseShard:
    """One institution's response vector y_i, paired with a FeatureShard."""

    values: np.ndarray
    shard_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ConfigError(f"response shard must be 1-D, got shape {v.shape}")
        object.__setattr__(self, "values", _frozen_f64(v, order="C"))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    def take_rows(self, rows: np.ndarray) -> "ResponseShard":
        return ResponseShard(self.values[rows], shard_id=self.shard_id)


def check_paired(shard: FeatureShard, response: ResponseShard) -> None:
    if shard.rows != response.rows:
        raise ConfigError(
            f"shard {shard.shard_id}: matrix has {shard.rows} rows but "
            f"response has {response.rows}"
        )


@dataclass(frozen=True)
class SparseVector:
    """Sorted (index, value) pairs; no explicit zeros stored."""

    length: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, copy=True)
        val = np.array(self.values, dtype=np.float64, copy=True)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ConfigError("sparse vector indices/values must be matching 1-D arrays")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ConfigError("sparse vector indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.length:
                raise ConfigError("sparse vector index out of range")
            if np.any(val == 0.0):
                raise ConfigError("sparse vector must not store explicit zeros")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def zeros(cls, length: int) -> "SparseVector":
        return cls(length, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64)
        idx = np.flatnonzero(dense).astype(np.int64)
        return cls(dense.shape[0], idx, dense[idx])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.length)
        out[self.indices] = self.values
        return out

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


def matvec(shard: FeatureShard, x) -> np.ndarray:
    """A_i x, exploiting sparsity of x when given a SparseVector."""
    if isinstance(x, SparseVector):
        if x.length != shard.cols:
            raise ConfigError(f"model length {x.length} != p={shard.cols}")
        if x.nnz == 0:
            return np.zeros(shard.rows)
        return shard.values[:, x.indices] @ x.values
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != shard.cols:
        raise ConfigError(f"model length {x.shape[0]} != p={shard.cols}")
    return shard.values @ x


def partial_gradient(shard: FeatureShard, response: ResponseShard, x) -> np.ndarray:
    """A_i^T (A_i x - y_i): this institution's share of the loss gradient."""
    check_paired(shard, response)
    residual = matvec(shard, x) - response.values
    return shard.values.T @ residual


def gradient_and_rss(shard: FeatureShard, response: ResponseShard, x) -> tuple[np.ndarray, float]:
    """Partial gradient plus this shard's squared residual, one pass."""
    check_paired(shard, response)
    residual = matvec(shard, x) - response.values
    return shard.values.T @ residual, float(residual @ residual)


def correlation_partial(shard: FeatureShard, response: ResponseShard) -> np.ndarray:
    """A_i^T y_i: shard share of the feature/response correlations."""
    check_paired(shard, response)
    return shard.values.T @ response.values


def column_sq_norms(shard: FeatureShard) -> np.ndarray:
    """||[A_i]_j||_2^2 for every column j."""
    return np.einsum("ij,ij->j", shard.values, shard.values)


def column_dot(shard: FeatureShard, j: int, v: np.ndarray) -> float:
    """Inner product of column j with a length-n_i vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != shard.rows:
        raise ConfigError(f"vector length {v.shape[0]} != n_i={shard.rows}")
    return float(shard.column(j) @ v)


def residual_sq_norm(shard: FeatureShard, response: ResponseShard, x) -> float:
    """||A_i x - y_i||_2^2."""
    check_paired(shard, response)
    r = matvec(shard, x) - response.values
    return float(r @ r)


def assemble(
    shards: list[FeatureShard], responses: list[ResponseShard]
) -> tuple[np.ndarray, np.ndarray]:
    """Stack shards into one dense (A, y) in ascending shard-id order,
    matching the global row layout."""
    pairs = sorted(zip(shards, responses), key=lambda pair: pair[0].shard_id)
    for shard, response in pairs:
        check_paired(shard, response)
    A = np.vstack([shard.values for shard, _ in pairs])
    y = np.concatenate([response.values for _, response in pairs])
    return A, y


def sum_in_order(parts: dict, order) -> np.ndarray | float:
    """Sum per-worker payloads following an explicit reduction order.

    Floating-point addition is order sensitive; every aggregation in the
    system (protocol or centralized reference) goes through this helper so
    distributed and centralized runs are bit-comparable.
    """
    order = list(order)
    if set(order) != set(parts.keys()):
        raise ConfigError(f"reduction order {order} does not match workers {sorted(parts)}")
    first = parts[order[0]]
    if np.isscalar(first) or getattr(first, "ndim", 1) == 0:
        total = float(first)
        for wid in order[1:]:
            total += float(parts[wid])
        return total
    total = np.array(parts[order[0]], dtype=np.float64, copy=True)
    for wid in order[1:]:
        nxt = np.asarray(parts[wid], dtype=np.float64)
        if nxt.shape != total.shape:
            raise ConfigError(
                f"payload length mismatch in aggregation: {nxt.shape} vs {total.shape}"
            )
        total += nxt
    return total
