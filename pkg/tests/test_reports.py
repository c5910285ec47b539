"""Deterministic CSV reports and figure rendering."""

import numpy as np

from helpers import centralized_session, make_instance
from fedlasso.pipeline import build_path, solve_path, stability_select
from fedlasso.reports import (
    config_digest,
    figure_bench,
    figure_path,
    figure_stability,
    write_bench_report,
    write_bench_timings,
    write_coefficients_report,
    write_path_report,
    write_stability_report,
    write_timings_report,
)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def run_small_path(seed=41, rule="edpp"):
    shards, responses, A, y, _ = make_instance(seed, n=30, p=15, m=2)
    ref = centralized_session(shards, responses)
    return solve_path(ref, build_path(4, 1.0, 0.3), rule=rule), (shards, responses)


def test_config_digest_is_order_blind_but_value_sensitive():
    a = config_digest({"x": 1, "y": [1, 2]})
    b = config_digest({"y": [1, 2], "x": 1})
    c = config_digest({"x": 2, "y": [1, 2]})
    assert a == b
    assert a != c
    assert len(a) == 64


def test_path_report_layout_and_determinism(tmp_path):
    result, _ = run_small_path()
    digest = config_digest({"run": "path"})
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_path_report(first, result, digest, seed=7)
    write_path_report(second, result, digest, seed=7)
    assert first.read_bytes() == second.read_bytes()

    lines = first.read_text().splitlines()
    assert lines[0] == f"# config_sha256={digest}, seed=7"
    assert lines[1].startswith("point,ratio,lam,")
    assert len(lines) == 2 + 4  # header lines + one row per point
    # float cells are repr-formatted: they round-trip exactly
    cells = lines[3].split(",")
    assert float(cells[2]) == result.points[1].lam
    assert float(cells[9]) == result.points[1].objective


def test_coefficients_report_lists_only_nonzeros(tmp_path):
    result, _ = run_small_path()
    out = tmp_path / "coef.csv"
    write_coefficients_report(out, result, config_digest({}), seed=0)
    lines = out.read_text().splitlines()[2:]
    want = sum(pt.nnz for pt in result.points)
    assert len(lines) == want
    for line in lines:
        point, feature, value = line.split(",")
        assert result.points[int(point)].x[int(feature)] == float(value)


def test_timings_reports_shape(tmp_path):
    result, _ = run_small_path()
    out = tmp_path / "timings.csv"
    write_timings_report(out, result)
    lines = out.read_text().splitlines()
    assert lines[0] == "point,seconds"
    assert lines[-1].startswith("total,")
    assert len(lines) == 2 + len(result.points)


def test_bench_reports(tmp_path):
    screened, (shards, responses) = run_small_path(rule="edpp")
    ref = centralized_session(shards, responses)
    unscreened = solve_path(ref, build_path(4, 1.0, 0.3), rule="none")
    digest = config_digest({"run": "bench"})
    out = tmp_path / "bench.csv"
    write_bench_report(out, screened, unscreened, digest, seed=3)
    lines = out.read_text().splitlines()
    assert len(lines) == 2 + 4
    for line in lines[2:]:
        rel_gap = float(line.split(",")[-1])
        assert rel_gap <= 1e-10

    timings = tmp_path / "bench_t.csv"
    write_bench_timings(timings, screened, unscreened)
    tlines = timings.read_text().splitlines()
    assert tlines[-1].startswith("ratio,")
    assert tlines[-2].startswith("total,")


def test_stability_report_rank_order(tmp_path):
    shards, responses, _, _, _ = make_instance(42, n=40, p=10, m=2)
    ref = centralized_session(shards, responses)
    stab = stability_select(ref, build_path(3, 0.8, 0.3), n_rounds=3,
                            subsample_size=30, base_seed=5)
    out = tmp_path / "stab.csv"
    write_stability_report(out, stab, config_digest({}), seed=5)
    lines = out.read_text().splitlines()[2:]
    assert len(lines) == 10
    counts = [int(line.split(",")[2]) for line in lines]
    assert counts == sorted(counts, reverse=True)
    assert [int(line.split(",")[0]) for line in lines] == list(range(10))


def test_figures_render_png(tmp_path):
    result, (shards, responses) = run_small_path()
    ref = centralized_session(shards, responses)
    unscreened = solve_path(ref, build_path(4, 1.0, 0.3), rule="none")
    stab = stability_select(ref, build_path(3, 0.8, 0.3), n_rounds=2,
                            subsample_size=25, base_seed=1)

    p1, p2, p3 = (tmp_path / n for n in ("path.png", "bench.png", "stab.png"))
    figure_path(result, p1)
    figure_bench(result, unscreened, p2)
    figure_stability(stab, p3, top_k=8, truth=np.array([0, 1, 2]))
    for path in (p1, p2, p3):
        blob = path.read_bytes()
        assert blob[:8] == PNG_MAGIC
        assert len(blob) > 5000  # an actual plot, not an empty canvas
