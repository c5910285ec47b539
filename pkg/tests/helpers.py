"""Shared builders for the test suite.

Everything here produces seeded, perfectly reproducible inputs; tests
freeze derived expectations against these builders plus the independent
coordinate-descent oracle.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from fedlasso.federated import CentralizedSession, FederatedSession
from fedlasso.linalg import FeatureShard, ResponseShard
from fedlasso.protocol import Federation, LocalTransport, SocketTransport
from fedlasso.solver import reference_solve
from fedlasso.worker import WorkerRuntime


def split_counts(rng: np.random.Generator, n: int, m: int) -> list[int]:
    """Random shard sizes, all positive, summing to n."""
    if m == 1:
        return [n]
    cuts = np.sort(rng.choice(np.arange(1, n), size=m - 1, replace=False))
    bounds = np.concatenate(([0], cuts, [n]))
    return list(np.diff(bounds).astype(int))


def make_instance(
    seed: int,
    n: int | None = None,
    p: int | None = None,
    m: int | None = None,
    support: int | None = None,
    snr: float = 8.0,
    latent: float = 0.4,
):
    """One random horizontally partitioned Lasso instance.

    Returns (shards, responses, A, y, beta). The design gets a shared
    latent factor so columns are correlated and screening has real work
    to do. Sizes not supplied are drawn from the seeded generator.
    """
    rng = np.random.default_rng(seed)
    n = int(n if n is not None else rng.integers(20, 101))
    p = int(p if p is not None else rng.integers(50, 501))
    m = int(m if m is not None else rng.choice([1, 2, 3, 5]))
    support = int(support if support is not None else max(2, p // 25))

    A = rng.standard_normal((n, p)) + latent * rng.standard_normal((n, 1))
    beta = np.zeros(p)
    idx = rng.choice(p, size=support, replace=False)
    beta[idx] = rng.choice([-1.0, 1.0], size=support)
    signal = A @ beta
    sigma = float(np.linalg.norm(signal) / np.sqrt(n * snr))
    y = signal + sigma * rng.standard_normal(n)

    counts = split_counts(rng, n, m)
    shards, responses = [], []
    start = 0
    for sid, cnt in enumerate(counts):
        shards.append(FeatureShard(A[start : start + cnt], shard_id=sid))
        responses.append(ResponseShard(y[start : start + cnt], shard_id=sid))
        start += cnt
    return shards, responses, A, y, beta


def runtimes_for(shards, responses) -> dict[int, WorkerRuntime]:
    return {
        s.shard_id: WorkerRuntime(s.shard_id, s.values, r.values)
        for s, r in zip(shards, responses)
    }


def centralized_session(shards, responses, config=None) -> CentralizedSession:
    return CentralizedSession(list(shards), list(responses), solver_config=config)


def local_session(shards, responses, config=None, transcript=None) -> FederatedSession:
    transport = LocalTransport(runtimes_for(shards, responses))
    federation = Federation(transport, transcript=transcript)
    return FederatedSession(federation, solver_config=config)


@contextlib.contextmanager
def socket_session(shards, responses, config=None, transcript=None):
    """FederatedSession over real TCP sockets; workers run in threads."""
    ports: dict[int, int] = {}
    ready = {sid: threading.Event() for sid in (s.shard_id for s in shards)}
    threads = []
    for runtime in runtimes_for(shards, responses).values():

        def serve(rt=runtime):
            from fedlasso.protocol import serve_worker

            def on_ready(port, sid=rt.shard_id):
                ports[sid] = port
                ready[sid].set()

            serve_worker(rt, on_ready=on_ready)

        thread = threading.Thread(target=serve, daemon=True)
        thread.start()
        threads.append(thread)
    for event in ready.values():
        if not event.wait(timeout=10.0):
            raise RuntimeError("socket worker did not come up")
    transport = SocketTransport({sid: ("127.0.0.1", port) for sid, port in ports.items()})
    transport.connect()
    session = FederatedSession(Federation(transport, transcript=transcript), solver_config=config)
    try:
        yield session
    finally:
        session.close()
        for thread in threads:
            thread.join(timeout=10.0)


def dense_objective(A, y, lam, x) -> float:
    r = A @ x - y
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(x)))


def dense_kkt(A, y, lam, x) -> float:
    """Stationarity residual computed straight from the dense problem."""
    c = A.T @ (y - A @ x) / lam
    on = np.abs(c - np.sign(x))
    off = np.maximum(np.abs(c) - 1.0, 0.0)
    return float(np.max(np.where(x != 0.0, on, off)))


def oracle(A, y, lam, tol=1e-10):
    """Coordinate-descent solution plus its objective."""
    x = reference_solve(A, y, lam, tol=tol)
    return x, dense_objective(A, y, lam, x)
