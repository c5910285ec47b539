"""Shard containers and the per-institution kernels."""

import numpy as np
import pytest

from fedlasso.errors import ConfigError
from fedlasso.linalg import (
    FeatureShard,
    ResponseShard,
    SparseVector,
    assemble,
    check_paired,
    column_dot,
    column_sq_norms,
    correlation_partial,
    gradient_and_rss,
    matvec,
    partial_gradient,
    residual_sq_norm,
    sum_in_order,
)

# Hand-worked fixture: A is 3x2, y length 3, x = [0.5, -1].
#   A x            = [-1.5, -2.5, -3.5]
#   r = A x - y    = [-2.5, -2.5, -5.5]
#   A^T r          = [-37.5, -48.0]
#   ||r||^2        = 42.75
HAND_A = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
HAND_Y = np.array([1.0, 0.0, 2.0])
HAND_X = np.array([0.5, -1.0])


def test_feature_shard_is_frozen_fortran_float64():
    shard = FeatureShard(np.array([[1, 2], [3, 4]], dtype=np.int32), shard_id=3)
    assert shard.values.dtype == np.float64
    assert shard.values.flags.f_contiguous
    assert not shard.values.flags.writeable
    assert (shard.rows, shard.cols) == (2, 2)
    assert shard.shard_id == 3
    with pytest.raises(ValueError):
        shard.values[0, 0] = 9.0


def test_feature_shard_does_not_alias_its_input():
    raw = np.ones((2, 2))
    shard = FeatureShard(raw)
    raw[0, 0] = 5.0
    assert shard.values[0, 0] == 1.0


def test_feature_shard_shape_validation():
    with pytest.raises(ConfigError):
        FeatureShard(np.zeros(3))
    with pytest.raises(ConfigError):
        FeatureShard(np.zeros((4, 0)))


def test_feature_shard_allows_zero_rows():
    shard = FeatureShard(np.zeros((0, 5)))
    assert shard.rows == 0
    assert np.array_equal(matvec(shard, np.ones(5)), np.zeros(0))
    assert np.array_equal(column_sq_norms(shard), np.zeros(5))


def test_response_shard_basics():
    resp = ResponseShard([1, 2, 3], shard_id=1)
    assert resp.values.dtype == np.float64
    assert not resp.values.flags.writeable
    assert resp.rows == 3
    with pytest.raises(ConfigError):
        ResponseShard(np.zeros((2, 2)))


def test_check_paired_rejects_row_mismatch():
    with pytest.raises(ConfigError):
        check_paired(FeatureShard(np.zeros((3, 2))), ResponseShard(np.zeros(4)))


def test_take_rows_and_columns():
    shard = FeatureShard(HAND_A, shard_id=7)
    sub = shard.take_columns(np.array([1]))
    assert sub.shard_id == 7
    assert np.array_equal(sub.values, HAND_A[:, [1]])
    rows = shard.take_rows(np.array([2, 0]))
    assert np.array_equal(rows.values, HAND_A[[2, 0]])
    resp = ResponseShard(HAND_Y, shard_id=7).take_rows(np.array([1]))
    assert np.array_equal(resp.values, [0.0])


def test_sparse_vector_roundtrip_and_invariants():
    dense = np.array([0.0, -2.0, 0.0, 0.5, 0.0])
    sv = SparseVector.from_dense(dense)
    assert sv.length == 5
    assert sv.nnz == 2
    assert np.array_equal(sv.indices, [1, 3])
    assert np.array_equal(sv.to_dense(), dense)
    assert SparseVector.zeros(4).nnz == 0
    assert np.array_equal(SparseVector.zeros(4).to_dense(), np.zeros(4))


def test_sparse_vector_validation():
    with pytest.raises(ConfigError):
        SparseVector(3, np.array([1, 1]), np.array([1.0, 2.0]))  # not increasing
    with pytest.raises(ConfigError):
        SparseVector(3, np.array([0, 5]), np.array([1.0, 2.0]))  # out of range
    with pytest.raises(ConfigError):
        SparseVector(3, np.array([0]), np.array([0.0]))  # explicit zero
    with pytest.raises(ConfigError):
        SparseVector(3, np.array([0, 1]), np.array([1.0]))  # length mismatch


def test_matvec_dense_and_sparse_agree():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, p = rng.integers(1, 30), rng.integers(1, 40)
        shard = FeatureShard(rng.standard_normal((n, p)))
        x = rng.standard_normal(p)
        x[rng.random(p) < 0.7] = 0.0
        dense = matvec(shard, x)
        sparse = matvec(shard, SparseVector.from_dense(x))
        assert np.allclose(dense, sparse, rtol=1e-14, atol=1e-14)
    with pytest.raises(ConfigError):
        matvec(FeatureShard(np.zeros((2, 3))), np.zeros(4))
    with pytest.raises(ConfigError):
        matvec(FeatureShard(np.zeros((2, 3))), SparseVector.zeros(4))


def test_gradient_and_rss_hand_values():
    shard = FeatureShard(HAND_A)
    resp = ResponseShard(HAND_Y)
    grad, rss = gradient_and_rss(shard, resp, HAND_X)
    assert np.array_equal(grad, [-37.5, -48.0])
    assert rss == 42.75
    assert np.array_equal(partial_gradient(shard, resp, HAND_X), grad)
    assert residual_sq_norm(shard, resp, HAND_X) == 42.75


def test_correlation_and_column_norms_hand_values():
    shard = FeatureShard(HAND_A)
    resp = ResponseShard(HAND_Y)
    # A^T y = [1+0+10, 2+0+12]; column squares = [1+9+25, 4+16+36]
    assert np.array_equal(correlation_partial(shard, resp), [11.0, 14.0])
    assert np.array_equal(column_sq_norms(shard), [35.0, 56.0])
    assert column_dot(shard, 1, HAND_Y) == 14.0
    with pytest.raises(ConfigError):
        column_dot(shard, 5, HAND_Y)
    with pytest.raises(ConfigError):
        column_dot(shard, 0, np.zeros(2))


def test_assemble_orders_by_shard_id():
    s0 = FeatureShard([[1.0]], shard_id=0)
    s2 = FeatureShard([[3.0]], shard_id=2)
    s1 = FeatureShard([[2.0]], shard_id=1)
    r0, r2, r1 = (ResponseShard([v], shard_id=i) for v, i in ((10.0, 0), (30.0, 2), (20.0, 1)))
    A, y = assemble([s2, s0, s1], [r2, r0, r1])
    assert np.array_equal(A, [[1.0], [2.0], [3.0]])
    assert np.array_equal(y, [10.0, 20.0, 30.0])


def test_sum_in_order_is_order_sensitive_and_validated():
    # Floating point addition does not associate: these three values sum
    # differently depending on order, which is exactly why the protocol
    # pins one.
    parts = {0: 1e16, 1: 1.0, 2: -1e16}
    assert sum_in_order(parts, [0, 1, 2]) == 0.0
    assert sum_in_order(parts, [0, 2, 1]) == 1.0

    vec_parts = {0: np.array([1e16]), 1: np.array([1.0]), 2: np.array([-1e16])}
    assert sum_in_order(vec_parts, [0, 1, 2])[0] == 0.0
    assert sum_in_order(vec_parts, [0, 2, 1])[0] == 1.0

    with pytest.raises(ConfigError):
        sum_in_order({0: 1.0}, [0, 1])
    with pytest.raises(ConfigError):
        sum_in_order({0: 1.0, 1: 2.0}, [0])


def test_partial_sums_recover_global_quantities():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((30, 12))
    y = rng.standard_normal(30)
    x = rng.standard_normal(12)
    blocks = [(0, 11), (11, 18), (18, 30)]
    shards = [FeatureShard(A[a:b], shard_id=i) for i, (a, b) in enumerate(blocks)]
    resps = [ResponseShard(y[a:b], shard_id=i) for i, (a, b) in enumerate(blocks)]
    order = [0, 1, 2]

    grad = sum_in_order(
        {i: gradient_and_rss(s, r, x)[0] for i, (s, r) in enumerate(zip(shards, resps))}, order
    )
    assert np.allclose(grad, A.T @ (A @ x - y), rtol=1e-12, atol=1e-12)

    correl = sum_in_order(
        {i: correlation_partial(s, r) for i, (s, r) in enumerate(zip(shards, resps))}, order
    )
    assert np.allclose(correl, A.T @ y, rtol=1e-12, atol=1e-12)

    colsq = sum_in_order({i: column_sq_norms(s) for i, s in enumerate(shards)}, order)
    assert np.allclose(colsq, np.sum(A * A, axis=0), rtol=1e-12, atol=1e-12)
