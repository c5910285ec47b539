"""Command-line front end.

Subcommands:

  gen        synthesize a cohort, partition it, write shard files + manifest
  worker     serve one shard file over a socket (one session, then exit)
  path       solve a penalty path; write reports and a figure
  bench      screened vs unscreened path on the same data; write comparison
  stability  subsample-and-count feature ranking; write reports and a figure
  audit      replay a transcript through the privacy checks

Every run subcommand accepts --config FILE (JSON); explicit flags win
over config values. Exit codes: 0 ok, 2 bad configuration, 3 protocol
failure, 4 solver failure, 5 data/IO failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, reports
from .errors import (
    ConfigError,
    DataError,
    DegenerateProblemError,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_PROTOCOL,
    EXIT_SOLVER,
    FedLassoError,
    ProtocolError,
    SolverError,
)
from .federated import CentralizedSession, FederatedSession
from .linalg import FeatureShard, ResponseShard
from .pipeline import RULE_EDPP, RULE_NONE, RULES, SPACINGS, SPACING_LINEAR, build_path, solve_path, stability_select
from .protocol import Federation, LocalTransport, SocketTransport, Transcript, privacy_audit, serve_worker
from .solver import STEP_BACKTRACKING, STEP_FIXED, SolverConfig
from .worker import WorkerRuntime

TRANSPORTS = ("local", "socket", "reference")


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """Fold CLI values over config-file values over hard defaults."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _solver_config(cfg: dict) -> SolverConfig:
    return SolverConfig(
        max_iters=int(cfg["max_iters"]),
        tolerance=float(cfg["tol"]),
        step_rule=cfg["step_rule"],
    )


def _parse_workers(spec: str) -> dict[int, tuple[str, int]]:
    endpoints = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            wid, addr = part.split("=", 1)
            host, port = addr.rsplit(":", 1)
            endpoints[int(wid)] = (host, int(port))
        except ValueError as exc:
            raise ConfigError(
                f"bad --workers entry {part!r}; want id=host:port"
            ) from exc
    if not endpoints:
        raise ConfigError("--workers gave no endpoints")
    return endpoints


def _load_runtimes(manifest_path) -> tuple[dict, dict[int, WorkerRuntime]]:
    doc, shards = dataio.load_shards(manifest_path)
    runtimes = {s.shard_id: WorkerRuntime(s.shard_id, s.A, s.y) for s in shards}
    return doc, runtimes


def _spawn_workers(manifest_path) -> tuple[dict[int, tuple[str, int]], list]:
    """Start one worker subprocess per manifest shard; collect their ports."""
    manifest_path = Path(manifest_path)
    doc = dataio.read_manifest(manifest_path)
    endpoints = {}
    procs = []
    for entry in doc["shards"]:
        shard_path = manifest_path.parent / entry["path"]
        proc = subprocess.Popen(
            [sys.executable, "-m", "fedlasso", "worker", "--shard", str(shard_path)],
            stdout=subprocess.PIPE,
            text=True,
        )
        procs.append(proc)
        line = proc.stdout.readline().strip()
        if not line.startswith("PORT "):
            proc.kill()
            raise ProtocolError(f"worker for shard {entry['shard_id']} printed {line!r}")
        endpoints[int(entry["shard_id"])] = ("127.0.0.1", int(line.split()[1]))
    return endpoints, procs


def _reap_workers(procs) -> None:
    deadline = time.monotonic() + 10.0
    for proc in procs:
        try:
            proc.wait(timeout=max(0.1, deadline - time.monotonic()))
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
        if proc.stdout:
            proc.stdout.close()


class _SessionHandle:
    """Owns whatever a run needs: session, transport, spawned workers."""

    def __init__(self, cfg: dict, solver_config: SolverConfig):
        self.procs = []
        self.transcript = None
        manifest = cfg["manifest"]
        transport_name = cfg["transport"]
        if transport_name not in TRANSPORTS:
            raise ConfigError(f"unknown transport {transport_name!r}; pick {TRANSPORTS}")
        if manifest is None and not (transport_name == "socket" and cfg["workers"]):
            raise ConfigError("--manifest is required (except socket runs with --workers)")

        self.doc = dataio.read_manifest(manifest) if manifest else None
        self.seed = int(self.doc["meta"].get("seed", 0)) if self.doc else 0

        if transport_name == "reference":
            doc, shards = dataio.load_shards(manifest)
            feats = [FeatureShard(s.A, shard_id=s.shard_id) for s in shards]
            resps = [ResponseShard(s.y, shard_id=s.shard_id) for s in shards]
            self.session = CentralizedSession(feats, resps, solver_config=solver_config)
            return

        if transport_name == "local":
            _, runtimes = _load_runtimes(manifest)
            transport = LocalTransport(runtimes)
        else:
            if cfg["workers"]:
                endpoints = _parse_workers(cfg["workers"])
            elif cfg["spawn"]:
                endpoints, self.procs = _spawn_workers(manifest)
            else:
                raise ConfigError("socket transport needs --workers or --spawn")
            transport = SocketTransport(endpoints)
            transport.connect()
        if cfg["transcript"]:
            self.transcript = Transcript()
        federation = Federation(transport, transcript=self.transcript)
        self.session = FederatedSession(federation, solver_config=solver_config)

    def close(self, transcript_path=None) -> None:
        try:
            self.session.close()
        finally:
            if self.procs:
                _reap_workers(self.procs)
            if self.transcript is not None and transcript_path:
                self.transcript.save(transcript_path)


_RUN_DEFAULTS = {
    "manifest": None,
    "transport": "local",
    "workers": None,
    "spawn": False,
    "transcript": None,
    "rule": RULE_EDPP,
    "points": 100,
    "min_ratio": 0.05,
    "max_ratio": 1.0,
    "spacing": SPACING_LINEAR,
    "tol": 1e-8,
    "max_iters": 50_000,
    "step_rule": STEP_FIXED,
}


def _add_run_args(sub, with_rule=True) -> None:
    sub.add_argument("--config", help="JSON file with defaults for these flags")
    sub.add_argument("--manifest", help="dataset manifest path")
    sub.add_argument("--transport", choices=TRANSPORTS, help="how to reach the shards")
    sub.add_argument("--workers", help="socket endpoints: id=host:port,...")
    sub.add_argument("--spawn", action="store_const", const=True,
                     help="socket transport: start workers from the manifest")
    sub.add_argument("--transcript", help="write the message transcript here (JSONL)")
    if with_rule:
        sub.add_argument("--rule", choices=RULES, help="screening rule")
    sub.add_argument("--points", type=int, help="number of path points")
    sub.add_argument("--min-ratio", dest="min_ratio", type=float, help="path end")
    sub.add_argument("--max-ratio", dest="max_ratio", type=float, help="path start")
    sub.add_argument("--spacing", choices=SPACINGS, help="grid spacing between ratios")
    sub.add_argument("--tol", type=float, help="solver stationarity tolerance")
    sub.add_argument("--max-iters", dest="max_iters", type=int, help="solver budget")
    sub.add_argument("--step-rule", dest="step_rule",
                     choices=(STEP_FIXED, STEP_BACKTRACKING), help="step size rule")
    sub.add_argument("--out", required=True, help="output directory")


def _run_config_digest(cfg: dict, doc: dict | None, extra: dict | None = None) -> str:
    record = {k: v for k, v in cfg.items() if k not in ("workers", "spawn", "transcript")}
    if doc is not None:
        record["n_total"] = doc["n_total"]
        record["p"] = doc["p"]
        record["dataset_meta"] = doc.get("meta", {})
    if extra:
        record.update(extra)
    record.pop("manifest", None)
    record.pop("transport", None)
    return reports.config_digest(record)


# --- subcommands -----------------------------------------------------------------


def _cmd_gen(args) -> int:
    defaults = {
        "out": None, "n": 500, "p": 1000, "m": 3, "support": 10, "snr": 10.0,
        "maf_low": 0.05, "maf_high": 0.5, "missing_rate": 0.0,
        "maf_threshold": 0.0, "standardize": False, "proportions": None, "seed": 0,
    }
    cfg = _merge(args, defaults)
    if not cfg["out"]:
        raise ConfigError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    synth_cfg = dataio.SynthConfig(
        n_subjects=int(cfg["n"]), n_features=int(cfg["p"]),
        support_size=int(cfg["support"]), snr=float(cfg["snr"]),
        maf_low=float(cfg["maf_low"]), maf_high=float(cfg["maf_high"]),
        missing_rate=float(cfg["missing_rate"]),
        maf_threshold=float(cfg["maf_threshold"]),
        standardize=bool(cfg["standardize"]), seed=int(cfg["seed"]),
    )
    synth = dataio.gen_synthetic(synth_cfg)
    n, p = synth.design.shape

    proportions = None
    if cfg["proportions"]:
        proportions = [float(tok) for tok in str(cfg["proportions"]).split(",")]
    counts = dataio.partition_counts(n, int(cfg["m"]), proportions)
    blocks = dataio.partition_rows(n, counts)

    entries = []
    for shard_id, rows in enumerate(blocks):
        name = f"shard_{shard_id}.bin"
        digest = dataio.write_shard(
            out / name, shard_id, synth.design[rows], synth.response[rows],
            rows.astype(np.uint64), n,
        )
        entries.append({"shard_id": shard_id, "path": name,
                        "rows": int(rows.size), "sha256": digest})

    meta = dict(synth_cfg.digest_fields())
    meta["sigma"] = synth.sigma
    meta["p_after_qc"] = p
    dataio.write_manifest(out / "manifest.json", n, p, entries, meta)

    with open(out / "truth.csv", "w", encoding="utf-8") as fh:
        fh.write("feature,beta\n")
        for j in np.flatnonzero(synth.beta):
            fh.write(f"{int(j)},{float(synth.beta[j])!r}\n")
    packed = dataio.pack_genotypes(synth.genotypes)
    np.savez_compressed(out / "genotypes.npz", packed=packed, n=n, p=p)

    print(f"wrote {len(entries)} shards ({n} subjects, {p} features) to {out}")
    print(f"shard sizes: {counts}; noise sigma {synth.sigma:.6g}")
    return EXIT_OK


def _cmd_worker(args) -> int:
    shard = dataio.read_shard(args.shard)
    runtime = WorkerRuntime(shard.shard_id, shard.A, shard.y)

    def on_ready(port):
        print(f"PORT {port}", flush=True)

    serve_worker(runtime, host=args.host, port=args.port, on_ready=on_ready)
    return EXIT_OK


def _cmd_path(args) -> int:
    cfg = _merge(args, dict(_RUN_DEFAULTS))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handle = _SessionHandle(cfg, _solver_config(cfg))
    try:
        ratios = build_path(
            int(cfg["points"]), float(cfg["max_ratio"]), float(cfg["min_ratio"]),
            spacing=cfg["spacing"],
        )
        result = solve_path(handle.session, ratios, rule=cfg["rule"])
    finally:
        handle.close(cfg["transcript"])

    digest = _run_config_digest(cfg, handle.doc)
    reports.write_path_report(out / "path.csv", result, digest, handle.seed)
    reports.write_coefficients_report(out / "coefficients.csv", result, digest, handle.seed)
    reports.write_timings_report(out / "timings.csv", result)
    reports.figure_path(result, out / "path.png")
    print(
        f"{len(result.points)} points, rule={cfg['rule']}, "
        f"mean rejection {result.rejection_mean():.3f}, "
        f"total {result.total_seconds:.2f}s"
    )
    print(f"reports in {out}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = _merge(args, dict(_RUN_DEFAULTS))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["rule"] == RULE_NONE:
        raise ConfigError("bench compares a screening rule against none; pick edpp or safe")
    handle = _SessionHandle(cfg, _solver_config(cfg))
    try:
        ratios = build_path(
            int(cfg["points"]), float(cfg["max_ratio"]), float(cfg["min_ratio"]),
            spacing=cfg["spacing"],
        )
        unscreened = solve_path(handle.session, ratios, rule=RULE_NONE)
        screened = solve_path(handle.session, ratios, rule=cfg["rule"])
    finally:
        handle.close(cfg["transcript"])

    digest = _run_config_digest(cfg, handle.doc)
    reports.write_bench_report(out / "bench.csv", screened, unscreened, digest, handle.seed)
    reports.write_bench_timings(out / "timings_bench.csv", screened, unscreened)
    reports.figure_bench(screened, unscreened, out / "bench.png")
    total_s, total_u = screened.total_seconds, unscreened.total_seconds
    speedup = total_u / total_s if total_s > 0 else float("nan")
    gaps = [
        abs(s.objective - u.objective) / max(abs(u.objective), 1e-300)
        for s, u in zip(screened.points, unscreened.points)
    ]
    print(
        f"mean rejection {screened.rejection_mean():.3f}; "
        f"wall clock {total_u:.2f}s -> {total_s:.2f}s ({speedup:.2f}x); "
        f"max objective gap {max(gaps):.3e}"
    )
    print(f"reports in {out}")
    return EXIT_OK


def _cmd_stability(args) -> int:
    defaults = dict(_RUN_DEFAULTS)
    defaults.update({"rounds": 50, "subsample": None, "base_seed": 0, "top": 10})
    cfg = _merge(args, defaults)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handle = _SessionHandle(cfg, _solver_config(cfg))
    try:
        if cfg["subsample"] is None:
            cfg["subsample"] = max(1, (7 * handle.session.n_total) // 10)
        ratios = build_path(
            int(cfg["points"]), float(cfg["max_ratio"]), float(cfg["min_ratio"]),
            spacing=cfg["spacing"],
        )
        result = stability_select(
            handle.session, ratios,
            n_rounds=int(cfg["rounds"]), subsample_size=int(cfg["subsample"]),
            base_seed=int(cfg["base_seed"]), rule=cfg["rule"],
        )
    finally:
        handle.close(cfg["transcript"])

    digest = _run_config_digest(cfg, handle.doc)
    reports.write_stability_report(out / "stability.csv", result, digest, handle.seed)

    truth = None
    if handle.doc is not None and cfg["manifest"]:
        truth_path = Path(cfg["manifest"]).parent / "truth.csv"
        if truth_path.exists():
            rows = np.loadtxt(truth_path, delimiter=",", skiprows=1, ndmin=2)
            truth = rows[:, 0].astype(int) if rows.size else None
    reports.figure_stability(result, out / "stability.png", top_k=int(cfg["top"]), truth=truth)

    top = result.top(int(cfg["top"]))
    print(f"top {len(top)} features by selection frequency:")
    for j in top:
        print(f"  feature {int(j)}: {result.frequencies[j]:.2f}")
    if truth is not None:
        hits = len(set(int(t) for t in truth) & set(int(j) for j in top))
        print(f"{hits}/{len(top)} of the top picks are in the true support")
    print(f"reports in {out}")
    return EXIT_OK


def _cmd_audit(args) -> int:
    transcript = Transcript.load(args.transcript)
    violations = privacy_audit(transcript)
    messages = sum(1 for e in transcript.events if e["type"] == "msg")
    if not violations:
        print(f"CLEAN: {messages} messages, 0 violations")
        return EXIT_OK
    print(f"{len(violations)} violation(s) in {messages} messages:")
    for v in violations:
        print(
            f"  [{v.rule}] round {v.round_id} worker {v.worker} "
            f"{v.direction} tag={v.tag!r} len={v.length}: {v.detail}"
        )
    return EXIT_PROTOCOL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlasso",
        description="L1 path solving with safe screening over partitioned cohorts",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="synthesize and partition a cohort")
    gen.add_argument("--config", help="JSON file with defaults for these flags")
    gen.add_argument("--out", help="output directory")
    gen.add_argument("--n", type=int, help="subjects")
    gen.add_argument("--p", type=int, help="features")
    gen.add_argument("--m", type=int, help="institutions")
    gen.add_argument("--support", type=int, help="true support size")
    gen.add_argument("--snr", type=float, help="signal to noise ratio")
    gen.add_argument("--maf-low", dest="maf_low", type=float)
    gen.add_argument("--maf-high", dest="maf_high", type=float)
    gen.add_argument("--missing-rate", dest="missing_rate", type=float)
    gen.add_argument("--maf-threshold", dest="maf_threshold", type=float)
    gen.add_argument("--standardize", action="store_const", const=True,
                     help="center and scale design columns")
    gen.add_argument("--proportions", help="comma separated shard proportions")
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=_cmd_gen)

    worker = subs.add_parser("worker", help="serve one shard over a socket")
    worker.add_argument("--shard", required=True, help="shard file path")
    worker.add_argument("--host", default="127.0.0.1")
    worker.add_argument("--port", type=int, default=0, help="0 picks a free port")
    worker.set_defaults(func=_cmd_worker)

    path = subs.add_parser("path", help="solve a penalty path")
    _add_run_args(path)
    path.set_defaults(func=_cmd_path)

    bench = subs.add_parser("bench", help="screened vs unscreened comparison")
    _add_run_args(bench)
    bench.set_defaults(func=_cmd_bench)

    stability = subs.add_parser("stability", help="subsample-and-count ranking")
    _add_run_args(stability)
    stability.add_argument("--rounds", type=int, help="subsample rounds")
    stability.add_argument("--subsample", type=int, help="subjects per round")
    stability.add_argument("--base-seed", dest="base_seed", type=int)
    stability.add_argument("--top", type=int, help="how many features to report")
    stability.set_defaults(func=_cmd_stability)

    audit = subs.add_parser("audit", help="check a transcript for leaks")
    audit.add_argument("--transcript", required=True)
    audit.set_defaults(func=_cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (SolverError, DegenerateProblemError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FedLassoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
