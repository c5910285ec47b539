"""Safe screening: mask codec, both rules, and the safety guarantee."""

import numpy as np
import pytest

from helpers import make_instance, oracle
from fedlasso.errors import ConfigError, DegenerateProblemError
from fedlasso.linalg import FeatureShard, ResponseShard, assemble, sum_in_order
from fedlasso.screening import (
    DiscardMask,
    check_screen_interval,
    dual_slice,
    edpp_screen_blocks,
    lambda_max_from_correlations,
    mixing_ratio,
    projection_mask,
    safe_screen,
    sp_partial,
    v1_slice,
    v2_slice,
    wv_partial,
)


def dense_edpp_mask(A, y, lam_k, lam_prev, lambda_max, x_prev):
    """Straight-line dense transcription of the dual-projection test,
    written independently of the shard/aggregation code path."""
    correlations = A.T @ y
    j_star = int(np.argmax(np.abs(correlations)))
    sign = 1.0 if correlations[j_star] >= 0.0 else -1.0
    first = lam_prev == lambda_max
    if first:
        theta = y / lambda_max
        v1 = sign * A[:, j_star]
    else:
        theta = (y - A @ x_prev) / lam_prev
        v1 = y / lam_prev - theta
    v2 = y / lam_k - theta
    denom = float(v1 @ v1)
    ratio = 0.0 if denom == 0.0 else float(v1 @ v2) / denom
    v2_perp = v2 - ratio * v1
    w = A.T @ (theta + 0.5 * v2_perp)
    radius = 0.5 * float(np.linalg.norm(v2_perp))
    col_norms = np.sqrt(np.sum(A * A, axis=0))
    return np.abs(w) < 1.0 - radius * col_norms


def test_discard_mask_counts_and_indices():
    mask = DiscardMask(np.array([True, False, True, True]))
    assert mask.p == 4
    assert mask.n_discarded == 3
    assert mask.rejection_fraction == 0.75
    assert np.array_equal(mask.kept_indices(), [1])
    assert DiscardMask.keep_all(3).n_discarded == 0
    assert DiscardMask.discard_all(3).n_discarded == 3
    with pytest.raises(ConfigError):
        DiscardMask(np.zeros((2, 2), dtype=bool))


def test_discard_mask_rle_roundtrip_exhaustive_patterns():
    rng = np.random.default_rng(7)
    patterns = [
        np.zeros(1, dtype=bool),
        np.ones(1, dtype=bool),
        np.zeros(17, dtype=bool),
        np.ones(17, dtype=bool),
        np.arange(23) % 2 == 0,
        np.arange(23) % 2 == 1,
    ]
    patterns += [rng.random(rng.integers(1, 200)) < rng.random() for _ in range(50)]
    for pattern in patterns:
        mask = DiscardMask(pattern)
        encoded = mask.to_floats()
        back = DiscardMask.from_floats(encoded)
        assert np.array_equal(back.discarded, pattern)
        # encoding is [p, first value, run lengths...]
        assert encoded[0] == pattern.size
        assert encoded[1] == float(pattern[0])
        assert encoded[2:].sum() == pattern.size


def test_discard_mask_from_floats_rejects_garbage():
    with pytest.raises(ConfigError):
        DiscardMask.from_floats(np.array([5.0]))
    with pytest.raises(ConfigError):
        DiscardMask.from_floats(np.array([5.0, 0.0, 2.0, 2.0]))  # runs sum to 4, p=5
    with pytest.raises(ConfigError):
        DiscardMask.from_floats(np.array([4.0, 0.0, 2.0, 0.0, 2.0]))  # zero-length run


def test_lambda_max_hand_and_degenerate():
    lam, j = lambda_max_from_correlations(np.array([1.0, -5.0, 3.0]))
    assert lam == 5.0 and j == 1
    # ties break to the first index
    lam, j = lambda_max_from_correlations(np.array([-2.0, 2.0]))
    assert lam == 2.0 and j == 0
    with pytest.raises(DegenerateProblemError):
        lambda_max_from_correlations(np.zeros(4))


def test_check_screen_interval():
    check_screen_interval(0.5, 1.0, 1.0)
    with pytest.raises(ConfigError):
        check_screen_interval(1.0, 0.5, 1.0)  # not descending
    with pytest.raises(ConfigError):
        check_screen_interval(0.0, 0.5, 1.0)
    with pytest.raises(ConfigError):
        check_screen_interval(0.4, 1.5, 1.0)  # above lambda_max


def test_mixing_ratio_zero_direction():
    assert mixing_ratio(0.0, 3.0) == 0.0
    assert mixing_ratio(2.0, 3.0) == 1.5


def test_projection_mask_strict_inequality_keeps_boundary():
    # |w| exactly equal to the threshold must be kept, not discarded.
    col_sq = np.array([4.0])  # ||a|| = 2
    v2_perp_sq = 0.25  # radius term: 0.5 * 0.5 * 2 = 0.5 -> threshold 0.5
    mask = projection_mask(np.array([0.5]), v2_perp_sq, col_sq)
    assert not mask.discarded[0]
    mask = projection_mask(np.array([0.49]), v2_perp_sq, col_sq)
    assert mask.discarded[0]
    # A tiny negative aggregate (floating point) must clamp to radius zero,
    # making the threshold exactly 1; a NaN would silently keep everything.
    mask = projection_mask(np.array([0.9]), -1e-18, np.array([1.0]))
    assert mask.discarded[0]
    mask = projection_mask(np.array([1.0]), -1e-18, np.array([1.0]))
    assert not mask.discarded[0]


def test_safe_screen_never_discards_oracle_support():
    for seed in range(25):
        _, _, A, y, _ = make_instance(seed, m=1)
        correlations = A.T @ y
        lambda_max = float(np.max(np.abs(correlations)))
        col_sq = np.sum(A * A, axis=0)
        y_norm = float(np.linalg.norm(y))
        for frac in (0.9, 0.6, 0.3):
            lam = frac * lambda_max
            mask = safe_screen(correlations, col_sq, y_norm, lam, lambda_max)
            x_star, _ = oracle(A, y, lam)
            leaked = np.flatnonzero((x_star != 0.0) & mask.discarded)
            assert leaked.size == 0, f"seed {seed} frac {frac}: {leaked}"


def test_safe_screen_rejects_bad_lam():
    with pytest.raises(ConfigError):
        safe_screen(np.ones(3), np.ones(3), 1.0, 0.0, 1.0)
    with pytest.raises(ConfigError):
        safe_screen(np.ones(3), np.ones(3), 1.0, 2.0, 1.0)


def test_edpp_blocks_match_dense_reimplementation():
    for seed in range(20):
        shards, responses, A, y, _ = make_instance(seed)
        order = [s.shard_id for s in shards]
        correlations = A.T @ y
        lambda_max = float(np.max(np.abs(correlations)))
        j_star = int(np.argmax(np.abs(correlations)))
        sign = 1.0 if correlations[j_star] >= 0.0 else -1.0
        col_sq = np.sum(A * A, axis=0)

        # first step down the path
        lam_k = 0.8 * lambda_max
        mask = edpp_screen_blocks(
            shards, responses, order, lam_k, lambda_max, lambda_max,
            j_star, sign, None, col_sq,
        )
        want = dense_edpp_mask(A, y, lam_k, lambda_max, lambda_max, None)
        assert np.array_equal(mask.discarded, want), f"seed {seed} first step"

        # a later step, screened from the oracle solution at lam_prev
        lam_prev, lam_next = 0.8 * lambda_max, 0.5 * lambda_max
        x_prev, _ = oracle(A, y, lam_prev)
        mask = edpp_screen_blocks(
            shards, responses, order, lam_next, lam_prev, lambda_max,
            j_star, sign, x_prev, col_sq,
        )
        want = dense_edpp_mask(A, y, lam_next, lam_prev, lambda_max, x_prev)
        assert np.array_equal(mask.discarded, want), f"seed {seed} later step"


def test_edpp_never_discards_oracle_support():
    for seed in range(25):
        shards, responses, A, y, _ = make_instance(seed + 100)
        order = [s.shard_id for s in shards]
        correlations = A.T @ y
        lambda_max = float(np.max(np.abs(correlations)))
        j_star = int(np.argmax(np.abs(correlations)))
        sign = 1.0 if correlations[j_star] >= 0.0 else -1.0
        col_sq = np.sum(A * A, axis=0)

        lam_prev = lambda_max
        x_prev = None
        for frac in (0.85, 0.6, 0.35, 0.15):
            lam = frac * lambda_max
            mask = edpp_screen_blocks(
                shards, responses, order, lam, lam_prev, lambda_max,
                j_star, sign, x_prev, col_sq,
            )
            x_star, _ = oracle(A, y, lam)
            leaked = np.flatnonzero((x_star != 0.0) & mask.discarded)
            assert leaked.size == 0, f"seed {seed} frac {frac}: {leaked}"
            x_prev, lam_prev = x_star, lam


def test_edpp_tightens_on_safe():
    # On the same instances the dual-projection rule should discard at
    # least as much as the static ball test at mid-path penalties.
    wins = 0
    for seed in range(10):
        shards, responses, A, y, _ = make_instance(seed + 300)
        order = [s.shard_id for s in shards]
        correlations = A.T @ y
        lambda_max = float(np.max(np.abs(correlations)))
        j_star = int(np.argmax(np.abs(correlations)))
        sign = 1.0 if correlations[j_star] >= 0.0 else -1.0
        col_sq = np.sum(A * A, axis=0)
        lam = 0.5 * lambda_max
        x_prev, _ = oracle(A, y, 0.75 * lambda_max)
        edpp = edpp_screen_blocks(
            shards, responses, order, lam, 0.75 * lambda_max, lambda_max,
            j_star, sign, x_prev, col_sq,
        )
        ball = safe_screen(correlations, col_sq, float(np.linalg.norm(y)), lam, lambda_max)
        if edpp.n_discarded > ball.n_discarded:
            wins += 1
    assert wins >= 8


def test_slice_helpers_respect_first_flag():
    shards, responses, A, y, _ = make_instance(1, n=30, p=20, m=2)
    lambda_max = float(np.max(np.abs(A.T @ y)))
    shard, resp = shards[0], responses[0]
    theta = dual_slice(shard, resp, lambda_max, lambda_max, None, True)
    assert np.allclose(theta, resp.values / lambda_max)
    with pytest.raises(ConfigError):
        dual_slice(shard, resp, 0.5 * lambda_max, lambda_max, None, False)

    v1_first = v1_slice(shard, resp, theta, lambda_max, lambda_max, 3, -1.0, True)
    assert np.array_equal(v1_first, -shard.values[:, 3])
    v1_later = v1_slice(shard, resp, theta, 0.5 * lambda_max, lambda_max, 3, -1.0, False)
    assert np.allclose(v1_later, resp.values / (0.5 * lambda_max) - theta)

    v2 = v2_slice(resp, theta, 0.5 * lambda_max)
    assert np.allclose(v2, resp.values / (0.5 * lambda_max) - theta)

    sp = sp_partial(v1_later, v2)
    assert sp.shape == (2,)
    assert sp[0] == pytest.approx(float(v1_later @ v1_later))
    assert sp[1] == pytest.approx(float(v1_later @ v2))

    wv = wv_partial(shard, theta, v1_later, v2, 0.5)
    v2_perp = v2 - 0.5 * v1_later
    assert np.allclose(wv[:-1], shard.values.T @ (theta + 0.5 * v2_perp))
    assert wv[-1] == pytest.approx(float(v2_perp @ v2_perp))


def test_sharded_slices_aggregate_to_dense_quantities():
    shards, responses, A, y, _ = make_instance(8, n=60, p=30, m=3)
    order = [s.shard_id for s in shards]
    lambda_max = float(np.max(np.abs(A.T @ y)))
    lam_prev, lam_k = 0.7 * lambda_max, 0.4 * lambda_max
    x_prev, _ = oracle(A, y, lam_prev)

    parts = {}
    for shard, resp in zip(shards, responses):
        theta = dual_slice(shard, resp, lam_prev, lambda_max, x_prev, False)
        v1 = v1_slice(shard, resp, theta, lam_prev, lambda_max, 0, 1.0, False)
        v2 = v2_slice(resp, theta, lam_k)
        parts[shard.shard_id] = sp_partial(v1, v2)
    s, p_dot = sum_in_order(parts, order)

    theta_full = (y - A @ x_prev) / lam_prev
    v1_full = y / lam_prev - theta_full
    v2_full = y / lam_k - theta_full
    assert s == pytest.approx(float(v1_full @ v1_full), rel=1e-12)
    assert p_dot == pytest.approx(float(v1_full @ v2_full), rel=1e-12)
