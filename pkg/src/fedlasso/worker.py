"""Institution-side runtime.

A worker owns one shard (A_i, y_i) and answers center queries frame by
frame. It never sends rows: every reply is an ack, a scalar, or a
p-length column aggregate. All numeric kernels are the shared ones from
`linalg` and `screening`, so a worker's arithmetic is identical to the
in-process reference's.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ProtocolError
from .linalg import (
    FeatureShard,
    ResponseShard,
    check_paired,
    column_sq_norms,
    correlation_partial,
    gradient_and_rss,
    residual_sq_norm,
)
from .protocol import Frame
from .screening import DiscardMask, dual_slice, sp_partial, v1_slice, v2_slice, wv_partial

_EMPTY = np.empty(0, dtype=np.float64)


def subsample_rows(base_seed: int, round_index: int, size: int, n_total: int) -> np.ndarray:
    """Global row ids of one stability subsample.

    Center and workers evaluate this independently from the broadcast
    (base_seed, round_index, size) triple and must get the same ids, so
    the draw is pinned to the seeded generator and nothing else.
    """
    if not 1 <= size <= n_total:
        raise ConfigError(f"subsample size {size} not in [1, {n_total}]")
    rng = np.random.default_rng([int(base_seed), int(round_index)])
    return rng.choice(n_total, size=int(size), replace=False)


def local_rows(global_ids: np.ndarray, offset: int, n_rows: int) -> np.ndarray:
    """Map global subsample ids to this shard's sorted local row indices."""
    ids = np.asarray(global_ids, dtype=np.int64)
    mine = ids[(ids >= offset) & (ids < offset + n_rows)] - offset
    return np.sort(mine)


def layout_offsets(shard_counts: dict[int, int]) -> dict[int, int]:
    """Global row offsets: shards are laid out in ascending id order."""
    offsets = {}
    running = 0
    for wid in sorted(shard_counts):
        offsets[wid] = running
        running += shard_counts[wid]
    return offsets


def reduce_shard(shard: FeatureShard, mask: DiscardMask) -> FeatureShard:
    """Column-reduce a shard by a mask; the no-op mask costs no copy."""
    if mask.p != shard.cols:
        raise ConfigError(f"mask covers {mask.p} features, shard has {shard.cols}")
    if mask.n_discarded == 0:
        return shard
    return shard.take_columns(mask.kept_indices())


class WorkerRuntime:
    """State machine that answers one center's session."""

    def __init__(self, shard_id: int, A: np.ndarray, y: np.ndarray):
        self.shard_id = int(shard_id)
        self._full_A = FeatureShard(A, shard_id=self.shard_id)
        self._full_y = ResponseShard(y, shard_id=self.shard_id)
        check_paired(self._full_A, self._full_y)
        self._active_A = self._full_A
        self._active_y = self._full_y
        self._reduced_A = self._active_A
        self._mask: DiscardMask | None = None
        self._n_total: int | None = None
        self._offset: int | None = None
        self._screen: dict | None = None
        self._x_prev: np.ndarray | None = None
        self._slices: tuple | None = None
        self._ratio: float | None = None
        self.closed = False
        self._handlers = {
            "session/rows": self._on_rows,
            "session/cols": self._on_cols,
            "session/layout": self._on_layout,
            "session/colsq": self._on_colsq,
            "session/correl": self._on_correl,
            "session/ysq": self._on_ysq,
            "screen/params": self._on_screen_params,
            "screen/x_prev": self._on_x_prev,
            "screen/sp": self._on_sp,
            "screen/ratio": self._on_ratio,
            "screen/wv": self._on_wv,
            "screen/mask": self._on_mask,
            "solve/grad": self._on_grad,
            "solve/loss": self._on_loss,
            "stab/subsample": self._on_subsample,
            "stab/reset": self._on_reset,
            "session/close": self._on_close,
        }

    @property
    def p(self) -> int:
        return self._full_A.cols

    @property
    def n_rows(self) -> int:
        return self._full_A.rows

    def handle(self, frame: Frame) -> Frame:
        handler = self._handlers.get(frame.tag)
        if handler is None:
            raise ProtocolError(f"worker {self.shard_id}: unknown tag {frame.tag!r}")
        payload = handler(frame.payload)
        if payload is None:
            payload = _EMPTY
        return Frame(frame.round_id, frame.kind, frame.tag, payload)

    # -- session setup

    def _on_rows(self, payload):
        return np.array([float(self.n_rows)])

    def _on_cols(self, payload):
        return np.array([float(self.p)])

    def _on_layout(self, payload):
        n_total, m = int(payload[0]), int(payload[1])
        pairs = payload[2:]
        if pairs.shape[0] != 2 * m:
            raise ProtocolError(f"layout payload wants {2 * m} id/count slots, got {pairs.shape[0]}")
        counts = {int(pairs[2 * i]): int(pairs[2 * i + 1]) for i in range(m)}
        if counts.get(self.shard_id) != self.n_rows:
            raise ProtocolError(
                f"layout says shard {self.shard_id} has {counts.get(self.shard_id)} rows, "
                f"worker holds {self.n_rows}"
            )
        if sum(counts.values()) != n_total:
            raise ProtocolError("layout counts do not add up to the stated total")
        self._n_total = n_total
        self._offset = layout_offsets(counts)[self.shard_id]
        return None

    def _on_colsq(self, payload):
        return column_sq_norms(self._active_A)

    def _on_correl(self, payload):
        return correlation_partial(self._active_A, self._active_y)

    def _on_ysq(self, payload):
        y = self._active_y.values
        return np.array([float(y @ y)])

    # -- dual-projection screening

    def _on_screen_params(self, payload):
        if payload.shape[0] != 6:
            raise ProtocolError(f"screen/params wants 6 floats, got {payload.shape[0]}")
        self._screen = {
            "lam_k": float(payload[0]),
            "lam_prev": float(payload[1]),
            "lambda_max": float(payload[2]),
            "first": bool(payload[3]),
            "argmax_col": int(payload[4]),
            "argmax_sign": float(payload[5]),
        }
        self._slices = None
        return None

    def _on_x_prev(self, payload):
        if payload.shape[0] != self.p:
            raise ProtocolError(f"x_prev has {payload.shape[0]} entries, expected {self.p}")
        self._x_prev = payload
        self._slices = None
        return None

    def _require_slices(self):
        if self._screen is None:
            raise ProtocolError("screening query before screen/params")
        if self._slices is None:
            s = self._screen
            if not s["first"] and self._x_prev is None:
                raise ProtocolError("screen/x_prev missing for a mid-path screen")
            theta = dual_slice(
                self._active_A, self._active_y, s["lam_prev"], s["lambda_max"],
                self._x_prev, s["first"],
            )
            v1 = v1_slice(
                self._active_A, self._active_y, theta, s["lam_prev"], s["lambda_max"],
                s["argmax_col"], s["argmax_sign"], s["first"],
            )
            v2 = v2_slice(self._active_y, theta, s["lam_k"])
            self._slices = (theta, v1, v2)
        return self._slices

    def _on_sp(self, payload):
        theta, v1, v2 = self._require_slices()
        return sp_partial(v1, v2)

    def _on_ratio(self, payload):
        self._ratio = float(payload[0])
        return None

    def _on_wv(self, payload):
        theta, v1, v2 = self._require_slices()
        if self._ratio is None:
            raise ProtocolError("screen/wv before screen/ratio")
        return wv_partial(self._active_A, theta, v1, v2, self._ratio)

    def _on_mask(self, payload):
        mask = DiscardMask.from_floats(payload)
        self._mask = mask
        self._reduced_A = reduce_shard(self._active_A, mask)
        return None

    # -- solving

    def _on_grad(self, payload):
        if payload.shape[0] != self._reduced_A.cols:
            raise ProtocolError(
                f"solve/grad carries {payload.shape[0]} coefficients, "
                f"reduced shard has {self._reduced_A.cols} columns"
            )
        grad, rss = gradient_and_rss(self._reduced_A, self._active_y, payload)
        return np.concatenate((grad, [rss]))

    def _on_loss(self, payload):
        if payload.shape[0] != self._reduced_A.cols:
            raise ProtocolError(
                f"solve/loss carries {payload.shape[0]} coefficients, "
                f"reduced shard has {self._reduced_A.cols} columns"
            )
        return np.array([residual_sq_norm(self._reduced_A, self._active_y, payload)])

    # -- stability subsampling

    def _on_subsample(self, payload):
        if self._n_total is None or self._offset is None:
            raise ProtocolError("stab/subsample before session/layout")
        base_seed, round_index, size = payload
        ids = subsample_rows(int(base_seed), int(round_index), int(size), self._n_total)
        rows = local_rows(ids, self._offset, self.n_rows)
        self._active_A = self._full_A.take_rows(rows)
        self._active_y = self._full_y.take_rows(rows)
        self._reset_derived()
        return None

    def _on_reset(self, payload):
        self._active_A = self._full_A
        self._active_y = self._full_y
        self._reset_derived()
        return None

    def _reset_derived(self):
        self._mask = None
        self._reduced_A = self._active_A
        self._screen = None
        self._x_prev = None
        self._slices = None
        self._ratio = None

    def _on_close(self, payload):
        self.closed = True
        return None
