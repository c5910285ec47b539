"""Session drivers: the verification reference and the protocol client.

`CentralizedSession` holds every shard in process and aggregates
partials by direct function calls; the protocol never runs.
`FederatedSession` drives the identical computation through a
`Federation`. Both use the per-shard kernels from `linalg` and
`screening` and sum in the same institution order, so penalties, masks,
iterates, and objectives agree bit for bit between them; only how the
partials travel differs.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ProtocolError, SolverError
from .linalg import (
    FeatureShard,
    ResponseShard,
    check_paired,
    column_sq_norms,
    correlation_partial,
    gradient_and_rss,
    residual_sq_norm,
    sum_in_order,
)
from .screening import (
    DiscardMask,
    check_screen_interval,
    edpp_screen_blocks,
    lambda_max_from_correlations,
    mixing_ratio,
    projection_mask,
    safe_screen,
)
from .solver import STEP_FIXED, SolverConfig, SolveResult, estimate_lipschitz, fista_solve
from .worker import layout_offsets, local_rows, reduce_shard, subsample_rows


class _SessionBase:
    """Orchestration shared by both session flavors.

    Subclasses provide the data-movement primitives (`_sum_*`,
    `_apply_*`, `_run_edpp`, `_source`); everything above that layer is
    this one code path.
    """

    def __init__(self, solver_config: SolverConfig | None):
        self.config = solver_config or SolverConfig()
        self._lipschitz: float | None = None
        self._mask: DiscardMask | None = None
        self._kept: np.ndarray | None = None

    def _refresh_aggregates(self) -> None:
        self.col_sq = self._sum_colsq()
        self.correlations = self._sum_correl()
        self.y_sq = float(self._sum_ysq())
        self.y_norm = float(np.sqrt(self.y_sq))
        self.lambda_max, self.argmax_col = lambda_max_from_correlations(self.correlations)
        self.argmax_sign = 1.0 if self.correlations[self.argmax_col] >= 0.0 else -1.0
        self.set_mask(DiscardMask.keep_all(self.p))
        if self.config.step_rule == STEP_FIXED:
            # Re-estimated on every aggregate refresh so a subsampled session
            # is indistinguishable from a session built on those rows alone.
            self._lipschitz = estimate_lipschitz(self._source(), self.correlations)

    @property
    def mask(self) -> DiscardMask:
        return self._mask

    @property
    def n_kept(self) -> int:
        return int(self._kept.size)

    def lipschitz(self) -> float:
        if self._lipschitz is None:
            raise SolverError("no curvature estimate; session runs the backtracking rule")
        return self._lipschitz

    def set_mask(self, mask: DiscardMask) -> None:
        if mask.p != self.p:
            raise ConfigError(f"mask covers {mask.p} features, session has {self.p}")
        if mask.n_discarded == mask.p:
            raise SolverError(
                "every feature is screened out; the zero vector is only optimal "
                "at lam >= lambda_max"
            )
        self._mask = mask
        self._kept = mask.kept_indices()
        self._apply_mask(mask)

    def safe_mask(self, lam: float) -> DiscardMask:
        """Static ball test; free, runs entirely on session aggregates."""
        return safe_screen(self.correlations, self.col_sq, self.y_norm, lam, self.lambda_max)

    def edpp_mask(self, lam_k: float, lam_prev: float, x_prev: np.ndarray | None) -> DiscardMask:
        """Dual-projection test at lam_k given the solution at lam_prev."""
        check_screen_interval(lam_k, lam_prev, self.lambda_max)
        first = lam_prev == self.lambda_max
        if not first:
            if x_prev is None:
                raise ConfigError("x_prev is required when lam_prev < lambda_max")
            x_prev = np.ascontiguousarray(x_prev, dtype=np.float64)
            if x_prev.shape != (self.p,):
                raise ConfigError(f"x_prev has shape {x_prev.shape}, expected ({self.p},)")
        return self._run_edpp(lam_k, lam_prev, x_prev, first)

    def solve(
        self, lam: float, x0_full: np.ndarray | None = None, trace: list | None = None
    ) -> tuple[np.ndarray, SolveResult]:
        """Solve at lam over the kept features; returns the full-length x."""
        kept = self._kept
        x0 = None if x0_full is None else np.asarray(x0_full, dtype=np.float64)[kept]
        if self.config.step_rule == STEP_FIXED:
            if kept.size < self.p:
                # Curvature of the reduced problem: the kept-column submatrix
                # has a spectral norm no larger than the full one, and usually
                # far smaller, so the reduced step can be much longer.
                lip = estimate_lipschitz(self._source(), self.correlations[kept], iters=20)
            else:
                lip = self.lipschitz()
            step = 1.0 / lip
        else:
            step = 1.0
        result = fista_solve(self._source(), lam, step, self.config, x0, trace)
        x_full = np.zeros(self.p)
        x_full[kept] = result.x
        return x_full, result

    def set_subsample(self, base_seed: int, round_index: int, size: int) -> None:
        """Restrict the session to a seeded subject subsample. Workers and
        center derive the same global row ids from the same triple; all
        session aggregates (including lambda_max) are recomputed."""
        if not 1 <= size <= self.n_total:
            raise ConfigError(f"subsample size {size} not in [1, {self.n_total}]")
        self._apply_subsample(int(base_seed), int(round_index), int(size))
        self._refresh_aggregates()

    def clear_subsample(self) -> None:
        self._apply_reset()
        self._refresh_aggregates()


class _BlockSource:
    """Gradient source over in-process shards, summed in institution order."""

    def __init__(self, pairs: dict[int, tuple[FeatureShard, ResponseShard]], order: list[int], dim: int):
        self._pairs = pairs
        self._order = order
        self.dim = dim

    def gradient(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        parts = {}
        for wid, (shard, response) in self._pairs.items():
            grad, rss = gradient_and_rss(shard, response, x)
            parts[wid] = np.concatenate((grad, [rss]))
        out = sum_in_order(parts, self._order)
        return out[:-1], float(out[-1])

    def loss(self, x: np.ndarray) -> float:
        parts = {
            wid: residual_sq_norm(shard, response, x)
            for wid, (shard, response) in self._pairs.items()
        }
        return 0.5 * float(sum_in_order(parts, self._order))


class CentralizedSession(_SessionBase):
    """Reference implementation over local shards, no protocol involved."""

    def __init__(
        self,
        shards: list[FeatureShard],
        responses: list[ResponseShard],
        reduction_order: list[int] | None = None,
        solver_config: SolverConfig | None = None,
    ):
        super().__init__(solver_config)
        if not shards or len(shards) != len(responses):
            raise ConfigError("need matching non-empty shard and response lists")
        pairs = {}
        for shard, response in zip(shards, responses):
            check_paired(shard, response)
            if shard.shard_id != response.shard_id:
                raise ConfigError(
                    f"shard ids disagree: {shard.shard_id} vs {response.shard_id}"
                )
            if shard.shard_id in pairs:
                raise ConfigError(f"duplicate shard id {shard.shard_id}")
            pairs[shard.shard_id] = (shard, response)
        ids = sorted(pairs)
        self.reduction_order = list(reduction_order) if reduction_order is not None else ids
        if sorted(self.reduction_order) != ids:
            raise ConfigError(
                f"reduction order {self.reduction_order} does not match shard ids {ids}"
            )
        cols = {shard.cols for shard, _ in pairs.values()}
        if len(cols) != 1:
            raise ConfigError(f"shards disagree on feature count: {sorted(cols)}")
        self.p = cols.pop()
        self.shard_rows = {wid: pairs[wid][0].rows for wid in ids}
        self.n_total = sum(self.shard_rows.values())
        self._offsets = layout_offsets(self.shard_rows)
        self._full = pairs
        self._active = dict(pairs)
        self._reduced = dict(pairs)
        self._refresh_aggregates()

    def _sum_colsq(self) -> np.ndarray:
        parts = {wid: column_sq_norms(shard) for wid, (shard, _) in self._active.items()}
        return sum_in_order(parts, self.reduction_order)

    def _sum_correl(self) -> np.ndarray:
        parts = {
            wid: correlation_partial(shard, response)
            for wid, (shard, response) in self._active.items()
        }
        return sum_in_order(parts, self.reduction_order)

    def _sum_ysq(self) -> float:
        parts = {
            wid: float(response.values @ response.values)
            for wid, (_, response) in self._active.items()
        }
        return float(sum_in_order(parts, self.reduction_order))

    def _apply_mask(self, mask: DiscardMask) -> None:
        self._reduced = {
            wid: (reduce_shard(shard, mask), response)
            for wid, (shard, response) in self._active.items()
        }

    def _apply_subsample(self, base_seed: int, round_index: int, size: int) -> None:
        ids = subsample_rows(base_seed, round_index, size, self.n_total)
        self._active = {
            wid: (
                shard.take_rows(local_rows(ids, self._offsets[wid], shard.rows)),
                response.take_rows(local_rows(ids, self._offsets[wid], shard.rows)),
            )
            for wid, (shard, response) in self._full.items()
        }

    def _apply_reset(self) -> None:
        self._active = dict(self._full)

    def _run_edpp(self, lam_k, lam_prev, x_prev, first) -> DiscardMask:
        shards = [self._active[wid][0] for wid in self.reduction_order]
        responses = [self._active[wid][1] for wid in self.reduction_order]
        return edpp_screen_blocks(
            shards,
            responses,
            self.reduction_order,
            lam_k,
            lam_prev,
            self.lambda_max,
            self.argmax_col,
            self.argmax_sign,
            x_prev,
            self.col_sq,
        )

    def _source(self) -> _BlockSource:
        pairs = {
            wid: (self._reduced[wid][0], self._active[wid][1])
            for wid in self.reduction_order
        }
        return _BlockSource(pairs, self.reduction_order, self.n_kept)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _FederationSource:
    """Gradient source that queries workers through the federation."""

    def __init__(self, federation, dim: int):
        self._fed = federation
        self.dim = dim

    def gradient(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        out = self._fed.vector_sum("solve/grad", x)
        return out[:-1], float(out[-1])

    def loss(self, x: np.ndarray) -> float:
        return 0.5 * self._fed.scalar_sum("solve/loss", x)


class FederatedSession(_SessionBase):
    """Center-side driver speaking the query protocol to live workers."""

    def __init__(self, federation, solver_config: SolverConfig | None = None):
        super().__init__(solver_config)
        self._fed = federation
        self.reduction_order = list(federation.reduction_order)
        m = len(self.reduction_order)

        federation.declare("session/rows", 0, 1)
        federation.declare("session/cols", 0, 1)
        rows = federation.scalar_collect("session/rows")
        cols = federation.scalar_collect("session/cols")
        widths = {int(v) for v in cols.values()}
        if len(widths) != 1:
            raise ProtocolError(f"workers disagree on feature count: {cols}")
        self.p = widths.pop()
        if self.p < 1:
            raise ProtocolError(f"workers report {self.p} features")
        self.shard_rows = {wid: int(v) for wid, v in rows.items()}
        if any(v < 0 for v in self.shard_rows.values()):
            raise ProtocolError(f"negative shard row count: {self.shard_rows}")
        self.n_total = sum(self.shard_rows.values())
        if self.n_total < 1:
            raise ProtocolError("no subjects anywhere in the federation")
        if federation.transcript is not None:
            federation.transcript.shard_rows = dict(self.shard_rows)

        federation.declare("session/layout", 2 + 2 * m, 0)
        layout = [float(self.n_total), float(m)]
        for wid in sorted(self.shard_rows):
            layout.extend((float(wid), float(self.shard_rows[wid])))
        federation.broadcast("session/layout", layout)

        federation.declare("session/colsq", 0, self.p)
        federation.declare("session/correl", 0, self.p)
        federation.declare("session/ysq", 0, 1)
        federation.declare("screen/params", 6, 0)
        federation.declare("screen/x_prev", self.p, 0)
        federation.declare("screen/sp", 0, 2)
        federation.declare("screen/ratio", 1, 0)
        federation.declare("screen/wv", 0, self.p + 1)
        federation.declare("stab/subsample", 3, 0)
        federation.declare("stab/reset", 0, 0)
        federation.declare("session/close", 0, 0)
        self._refresh_aggregates()

    def _sum_colsq(self) -> np.ndarray:
        return self._fed.vector_sum("session/colsq")

    def _sum_correl(self) -> np.ndarray:
        return self._fed.vector_sum("session/correl")

    def _sum_ysq(self) -> float:
        return self._fed.scalar_sum("session/ysq")

    def _apply_mask(self, mask: DiscardMask) -> None:
        encoded = mask.to_floats()
        self._fed.declare("screen/mask", encoded.shape[0], 0)
        self._fed.broadcast("screen/mask", encoded)
        k = mask.p - mask.n_discarded
        self._fed.declare("solve/grad", k, k + 1)
        self._fed.declare("solve/loss", k, 1)

    def _apply_subsample(self, base_seed: int, round_index: int, size: int) -> None:
        self._fed.broadcast(
            "stab/subsample", [float(base_seed), float(round_index), float(size)]
        )

    def _apply_reset(self) -> None:
        self._fed.broadcast("stab/reset", ())

    def _run_edpp(self, lam_k, lam_prev, x_prev, first) -> DiscardMask:
        self._fed.broadcast(
            "screen/params",
            [
                lam_k,
                lam_prev,
                self.lambda_max,
                1.0 if first else 0.0,
                float(self.argmax_col),
                self.argmax_sign,
            ],
        )
        if not first:
            self._fed.broadcast("screen/x_prev", x_prev)
        sp = self._fed.vector_sum("screen/sp")
        ratio = mixing_ratio(float(sp[0]), float(sp[1]))
        self._fed.broadcast("screen/ratio", [ratio])
        wv = self._fed.vector_sum("screen/wv")
        return projection_mask(wv[:-1], float(wv[-1]), self.col_sq)

    def _source(self) -> _FederationSource:
        return _FederationSource(self._fed, self.n_kept)

    def close(self) -> None:
        try:
            self._fed.broadcast("session/close", ())
        finally:
            self._fed.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
