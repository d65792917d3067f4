import math
import os

import numpy as np
import pytest

from distrib_td import experiments as ex
from distrib_td.cli import main, plot_traces, read_trace
from distrib_td.mdp_model import make_experiment_mdp, save_model
from distrib_td.svgplot import line_plot

FAST = dict(k_list=(8,), max_iter=400, checkpoint_every=100, seeds=(0,))


def _cli(tmp_path, *args):
    return main([args[0], "--out", str(tmp_path), *args[1:]])


# ------------------------------------------------------------------ config


def test_parse_config_accepts_sections_and_comments():
    text = "[model]\nmodel_seed = 4  # trailing\n\n[learn]\nk-list = 8, 16\nalpha_range = 0.5:2\n"
    vals = ex.parse_config(text)
    assert vals == {"model_seed": 4, "k_list": (8, 16), "alpha_range": (0.5, 2.0)}


@pytest.mark.parametrize("text,line,msg", [
    ("alpha = 0.1\nnonsense\n", 2, "key = value"),
    ("\n\nbogus = 1\n", 3, "unknown field"),
    ("alpha = 0.1\nalpha = 0.2\n", 2, "twice"),
    ("batch = many\n", 1, "bad value"),
    ("alpha_range = 2:1\n", 1, "bad value"),
])
def test_parse_config_errors_carry_line_numbers(text, line, msg):
    with pytest.raises(ex.ConfigError, match=rf"cfg\.ini:{line}:.*{msg}"):
        ex.parse_config(text, "cfg.ini")


@pytest.mark.parametrize("kw,msg", [
    (dict(epsilon=0.0), "epsilon"),
    (dict(epsilon=1.0, divergence=0.5), "divergence"),
    (dict(k_list=()), "empty"),
    (dict(k_list=(4, 4)), "repeated"),
    (dict(k_list=(0,)), "positive"),
    (dict(max_iter=101), "even"),
    (dict(algorithm="sarsa"), "algorithm"),
    (dict(seeds=()), "seeds"),
    (dict(rel_tol=1.5), "rel_tol"),
])
def test_config_invariants(kw, msg):
    with pytest.raises(ex.ConfigError, match=msg):
        ex.ExperimentConfig(**kw)


def test_config_text_round_trip(tmp_path):
    cfg = ex.ExperimentConfig(k_list=(8, 12), alpha_range=(0.1, 3.0), seeds=(1, 2, 3), alpha=1 / 3)
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_text())
    assert ex.load_config(path) == cfg
    assert ex.load_config(path, alpha=0.5).alpha == 0.5
    with pytest.raises(ex.ConfigError):
        ex.load_config(None, nonsense=1)


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv(ex.THREADS_ENV, raising=False)
    assert ex.resolve_threads() == 1
    monkeypatch.setenv(ex.THREADS_ENV, "3")
    assert ex.resolve_threads() == 3
    assert ex.resolve_threads(2) == 2
    monkeypatch.setenv(ex.THREADS_ENV, "lots")
    with pytest.raises(ex.ConfigError):
        ex.resolve_threads()
    with pytest.raises(ex.ConfigError):
        ex.resolve_threads(0)


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    path = tmp_path / "sub" / "out.csv"
    ex.atomic_write(path, "a\n")
    ex.atomic_write(path, "b\n")
    assert path.read_text() == "b\n"
    assert os.listdir(path.parent) == ["out.csv"]


def test_csv_text_echoes_config():
    cfg = ex.ExperimentConfig()
    text = ex.csv_text(("x", "flag"), [(1.5, True)], cfg)
    lines = text.splitlines()
    assert all(ln.startswith("# ") for ln in lines[:-2])
    assert lines[-2:] == ["x,flag", "1.5,1"]


# -------------------------------------------------------------------- fits


def test_quadratic_fit_is_exact_on_quadratics():
    K = np.array([30, 45, 75, 105, 150])
    fit = ex.quadratic_fit(K, 2.0 - 0.5 * K + 0.07 * K**2)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert (fit.a, fit.b, fit.c) == pytest.approx((2.0, -0.5, 0.07), rel=1e-8)
    assert ex.quadratic_fit([1, 2, 3], [5, 5, 5]).r2 == 1.0
    with pytest.raises(ValueError):
        ex.quadratic_fit([1, 2], [1, 2])


def _fake(alg, K, lo, hi):
    return ex.AlphaSearchResult(alg, K, lo, hi, 1.0, (0,))


def test_scaling_report_needs_five_points():
    pmf = [_fake("ssgd_pmf", K, 1 / K**2, 1.1 / K**2) for K in (10, 20, 30, 40)]
    with pytest.raises(ValueError, match="at least 5"):
        ex.scaling_report(pmf, [])
    pmf.append(_fake("ssgd_pmf", 50, 1 / 2500, 1.1 / 2500))
    ctd = [_fake("linear_ctd", K, 3.0, 3.3) for K in (10, 30, 50)]
    rep = ex.scaling_report(pmf, ctd)
    assert rep.pmf_fit.r2 > 0.999 and rep.flatness_ratio == pytest.approx(1.0)
    assert "r2 = " in rep.text() and "ctd_flatness_ratio" in rep.text()


# --------------------------------------------------------------------- run


def test_zero_step_gives_flat_trace():
    res = ex.cmd_run(ex.ExperimentConfig(alpha=0.0, **FAST))
    losses = [r[7] for r in res.rows]
    assert len(losses) == 5 and len(set(losses)) == 1
    assert res.identity_max_gap < 1e-12


@pytest.mark.parametrize("alg", ex.ALGORITHMS)
def test_run_identity_and_shape(alg):
    res = ex.cmd_run(ex.ExperimentConfig(algorithm=alg, alpha=0.05, **FAST))
    assert [r[4] for r in res.rows] == [0, 100, 200, 300, 400]
    assert all(len(r) == len(ex.TRACE_COLUMNS) for r in res.rows)
    assert res.identity_max_gap < 1e-10
    assert res.rows[-1][7] < res.rows[0][7]


def test_run_csv_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["run", "--out", str(d), "--k-list", "8", "--max-iter", "400", "--seeds", "0,1"]) == 0
    assert (a / "trace_linear_ctd.csv").read_bytes() == (b / "trace_linear_ctd.csv").read_bytes()


def test_run_with_worker_processes_matches_serial():
    cfg = ex.ExperimentConfig(alpha=0.5, k_list=(6, 8), max_iter=200, checkpoint_every=100, seeds=(0, 1))
    assert ex.cmd_run(cfg, threads=2).rows == ex.cmd_run(cfg, threads=1).rows


def test_model_file_is_honoured(tmp_path):
    m, f = make_experiment_mdp(9)
    path = tmp_path / "model.json"
    save_model(path, m, f)
    cfg = ex.ExperimentConfig(model_file=str(path), alpha=0.5, **FAST)
    ref = ex.ExperimentConfig(model_seed=9, alpha=0.5, **FAST)
    assert ex.cmd_run(cfg).rows == ex.cmd_run(ref).rows


# ------------------------------------------------------------ alpha search


def test_small_alpha_search_is_consistent():
    cfg = ex.ExperimentConfig(k_list=(8,), max_iter=4000, checkpoint_every=200, epsilon=1e-3, seeds=(0, 1),
                              rel_tol=0.2)
    (res,) = ex.cmd_alpha_search(cfg)
    assert res.lower < res.alpha_inf < res.upper <= res.lower * 1.2
    assert ex.probes_consistent(res)
    assert math.isfinite(res.iterations_at_fifth)
    assert {p[4] for p in res.probes} <= {"converged", "diverged", "stalled"}


def test_alpha_search_range_errors():
    cfg = ex.ExperimentConfig(k_list=(8,), max_iter=2000, checkpoint_every=200, epsilon=1e-3)
    with pytest.raises(ex.SearchRangeError, match="raise the range"):
        ex.cmd_alpha_search(cfg.replace(alpha_range=(0.1, 0.5)))
    with pytest.raises(ex.SearchRangeError, match="lower the range"):
        ex.cmd_alpha_search(cfg.replace(alpha_range=(10.0, 20.0)))


def test_degenerate_threshold_is_reported():
    cfg = ex.ExperimentConfig(epsilon=10.0, **FAST)
    (res,) = ex.cmd_alpha_search(cfg)
    assert res.degenerate and res.upper == math.inf and res.alpha_inf == res.lower


def test_default_ranges_scale_with_K():
    lo, hi = ex.default_alpha_range("ssgd_pmf", 100)
    assert (lo, hi) == (1e-4, 64e-4)
    assert ex.default_alpha_range("linear_ctd", 100) == ex.default_alpha_range("linear_ctd", 10)


# ------------------------------------------------------------------ verify


def test_verify_passes_and_skips(tmp_path, capsys):
    assert _cli(tmp_path, "verify", "--k-list", "2,8") == 0
    out = capsys.readouterr().out
    assert out.count("SKIP K=2") == 3 and "SKIP K=8" not in out
    rows = (tmp_path / "verify.csv").read_text().splitlines()
    assert rows[[i for i, r in enumerate(rows) if not r.startswith("#")][0]] == ",".join(ex.VERIFY_COLUMNS)


def test_verify_flags_scaled_features(tmp_path, capsys):
    assert _cli(tmp_path, "verify", "--k-list", "8", "--feature-scale", "3") == 1
    out = capsys.readouterr().out
    assert "FAIL K=8 C_A <= 4" in out


def test_verify_checks_report_margins():
    checks = ex.verify_checks(ex.ExperimentConfig(), 8)
    assert all(c.status == "pass" for c in checks)
    assert all(c.margin >= -c.tolerance for c in checks)


# ------------------------------------------------------------- CLI + plots


def test_help_lists_csv_columns(capsys):
    with pytest.raises(SystemExit):
        main(["run", "--help"])
    out = capsys.readouterr().out
    assert "neg_log10_plotted_loss" in out and "iterations_at_0.2_alpha_inf" in out


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("alpha = 1\nwhat\n")
    assert _cli(tmp_path, "run", "--config", str(bad)) == 2
    assert "bad.ini:2:" in capsys.readouterr().err


def test_plot_is_deterministic(tmp_path):
    assert _cli(tmp_path, "run", "--k-list", "8", "--max-iter", "400", "--seeds", "0,1") == 0
    trace = str(tmp_path / "trace_linear_ctd.csv")
    svgs = []
    for name in ("a.svg", "b.svg"):
        assert main(["plot", trace, "--out", str(tmp_path / name), "--title", "K & co"]) == 0
        svgs.append((tmp_path / name).read_bytes())
    assert svgs[0] == svgs[1]
    assert b"linear_ctd K=8" in svgs[0] and b"K &amp; co" in svgs[0]
    assert [r["t"] for r in read_trace(trace)] == [0, 400, 0, 400]


def test_empty_plot_is_valid_svg():
    svg = line_plot([])
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert plot_traces([]) == line_plot([], ylabel="-log10 plotted loss")


def test_malformed_trace_reports_row(tmp_path, capsys):
    p = tmp_path / "t.csv"
    p.write_text("# cfg\n" + ",".join(ex.TRACE_COLUMNS) + "\nlinear_ctd,8,0,0.1,0,1,1,1,0,0,1,0\n"
                 "linear_ctd,8,0,0.1\n")
    with pytest.raises(ValueError, match="row 4"):
        read_trace(p)
    assert main(["plot", str(p), "--out", str(tmp_path / "x.svg")]) == 2
    assert "row 4" in capsys.readouterr().err
    p.write_text("t,loss\n")
    with pytest.raises(ValueError, match="row 1"):
        read_trace(p)
