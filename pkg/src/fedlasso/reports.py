"""Delimited reports and figures for path, benchmark, and stability runs.

Report CSVs are deterministic: float cells use repr (shortest
round-trip), rows are fully ordered, and nothing time- or host-
dependent goes in. Wall-clock numbers live in separate timing CSVs so
the main reports stay byte-identical across reruns. Each deterministic
CSV starts with a comment line carrying the SHA-256 of the run
configuration and the dataset seed.
"""

from __future__ import annotations

import hashlib
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import PathResult, StabilityResult


def config_digest(config: dict) -> str:
    """SHA-256 over the canonical JSON form of a configuration dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_rows(path, digest: str, seed: int, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_sha256={digest}, seed={seed}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(cell) for cell in row) + "\n")


def write_path_report(path, result: PathResult, digest: str, seed: int) -> None:
    header = [
        "point", "ratio", "lam", "n_kept", "n_discarded", "rejection_fraction",
        "nnz", "iterations", "rounds", "objective", "kkt_residual",
    ]
    rows = [
        [
            pt.index, pt.ratio, pt.lam, pt.n_kept, pt.n_discarded,
            pt.rejection_fraction, pt.nnz, pt.iterations, pt.solver_rounds,
            pt.objective, pt.kkt_residual,
        ]
        for pt in result.points
    ]
    _write_rows(path, digest, seed, header, rows)


def write_coefficients_report(path, result: PathResult, digest: str, seed: int) -> None:
    """Nonzero coefficients only, one row per (point, feature)."""
    rows = []
    for pt in result.points:
        for j in np.flatnonzero(pt.x):
            rows.append([pt.index, int(j), pt.x[j]])
    _write_rows(path, digest, seed, ["point", "feature", "value"], rows)


def write_timings_report(path, result: PathResult) -> None:
    """Wall-clock seconds per path point; intentionally not deterministic."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point,seconds\n")
        for pt, seconds in zip(result.points, result.point_seconds):
            fh.write(f"{pt.index},{seconds:.6f}\n")
        fh.write(f"total,{result.total_seconds:.6f}\n")


def write_bench_report(path, screened: PathResult, unscreened: PathResult,
                       digest: str, seed: int) -> None:
    header = [
        "point", "ratio", "lam", "n_kept", "rejection_fraction",
        "objective_screened", "objective_unscreened", "objective_rel_gap",
    ]
    rows = []
    for spt, upt in zip(screened.points, unscreened.points):
        scale = max(abs(spt.objective), abs(upt.objective), 1e-300)
        rows.append(
            [
                spt.index, spt.ratio, spt.lam, spt.n_kept, spt.rejection_fraction,
                spt.objective, upt.objective,
                abs(spt.objective - upt.objective) / scale,
            ]
        )
    _write_rows(path, digest, seed, header, rows)


def write_bench_timings(path, screened: PathResult, unscreened: PathResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point,seconds_screened,seconds_unscreened\n")
        for spt, ssec, usec in zip(
            screened.points, screened.point_seconds, unscreened.point_seconds
        ):
            fh.write(f"{spt.index},{ssec:.6f},{usec:.6f}\n")
        total_s, total_u = screened.total_seconds, unscreened.total_seconds
        fh.write(f"total,{total_s:.6f},{total_u:.6f}\n")
        ratio = total_s / total_u if total_u > 0 else float("nan")
        fh.write(f"ratio,{ratio:.6f},1.000000\n")


def write_stability_report(path, result: StabilityResult, digest: str, seed: int) -> None:
    header = ["rank", "feature", "count", "frequency"]
    rows = []
    for rank, feature in enumerate(result.ranking()):
        rows.append(
            [rank, int(feature), int(result.counts[feature]),
             result.frequencies[feature]]
        )
    _write_rows(path, digest, seed, header, rows)


# --- figures -------------------------------------------------------------------


def figure_path(result: PathResult, out_path, max_lines: int = 20) -> None:
    """Coefficient profiles over the grid plus the screening yield."""
    coefs = result.coefficients()
    ratios = result.ratios
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(8, 8), sharex=True)

    ever = np.flatnonzero(np.any(coefs != 0.0, axis=0))
    if ever.size > max_lines:
        strength = np.max(np.abs(coefs[:, ever]), axis=0)
        ever = ever[np.argsort(-strength)[:max_lines]]
    for j in sorted(ever):
        top.plot(ratios, coefs[:, j], lw=1.0, label=f"feature {j}")
    top.set_ylabel("coefficient")
    top.set_title(f"solution path ({result.rule} screening)")
    if 0 < ever.size <= 10:
        top.legend(fontsize="x-small", ncol=2)
    top.axhline(0.0, color="k", lw=0.5, alpha=0.4)

    rejection = [pt.rejection_fraction for pt in result.points]
    nnz = [pt.nnz for pt in result.points]
    bottom.plot(ratios, rejection, "o-", ms=2.5, label="rejection fraction")
    bottom.set_ylabel("rejection fraction")
    bottom.set_ylim(-0.02, 1.02)
    twin = bottom.twinx()
    twin.plot(ratios, nnz, "s--", ms=2.5, color="tab:orange", label="nonzeros")
    twin.set_ylabel("nonzeros")
    bottom.set_xlabel("penalty ratio (lam / lam_max)")
    bottom.invert_xaxis()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def figure_bench(screened: PathResult, unscreened: PathResult, out_path) -> None:
    """Screened vs unscreened cost along the grid."""
    ratios = screened.ratios
    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4.5))

    left.plot(ratios, unscreened.point_seconds, label="unscreened", lw=1.2)
    left.plot(ratios, screened.point_seconds, label=f"{screened.rule} screened", lw=1.2)
    left.set_xlabel("penalty ratio (lam / lam_max)")
    left.set_ylabel("seconds per point")
    left.invert_xaxis()
    left.legend()
    total_s, total_u = screened.total_seconds, unscreened.total_seconds
    speedup = total_u / total_s if total_s > 0 else float("nan")
    left.set_title(f"wall clock: {total_u:.1f}s vs {total_s:.1f}s ({speedup:.1f}x)")

    rejection = [pt.rejection_fraction for pt in screened.points]
    right.plot(ratios, rejection, "o-", ms=2.5, color="tab:green")
    right.set_xlabel("penalty ratio (lam / lam_max)")
    right.set_ylabel("rejection fraction")
    right.set_ylim(-0.02, 1.02)
    right.invert_xaxis()
    right.set_title(f"mean rejection {screened.rejection_mean():.3f}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def figure_stability(result: StabilityResult, out_path, top_k: int = 30,
                     truth: np.ndarray | None = None) -> None:
    """Selection frequencies of the top-ranked features; true support (if
    known) is highlighted."""
    top_k = min(top_k, result.p)
    chosen = result.top(top_k)
    freqs = result.frequencies[chosen]
    truth_set = set() if truth is None else set(int(t) for t in truth)
    colors = ["tab:green" if int(j) in truth_set else "tab:blue" for j in chosen]

    fig, ax = plt.subplots(figsize=(max(6.0, 0.3 * top_k), 4.5))
    ax.bar(np.arange(top_k), freqs, color=colors)
    ax.set_xticks(np.arange(top_k))
    ax.set_xticklabels([str(int(j)) for j in chosen], rotation=90, fontsize=7)
    ax.set_xlabel("feature")
    ax.set_ylabel("selection frequency")
    ax.set_ylim(0, 1.05)
    title = f"stability selection over {result.n_rounds} rounds"
    if truth is not None:
        hits = sum(1 for j in chosen if int(j) in truth_set)
        title += f" ({hits}/{top_k} in true support)"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
