"""``distrib-td`` command line: run, alpha-search, k-scaling, verify, plot."""

from __future__ import annotations

import argparse
import math
import os
import sys
from collections import defaultdict

from . import experiments as ex
from .svgplot import line_plot

CSV_HELP = """\
output files (CSV, '#' lines echo the full config):
  run          trace_<algorithm>.csv
               columns: algorithm,K,seed,alpha,t,loss_l2_mu,loss_w1_mu,plotted_loss,
                        neg_log10_plotted_loss,identity_gap,theta_norm,diverged
               plotted_loss = (1-gamma) * loss_l2_mu^2 = (1/K)|theta_bar - theta*|^2 in I kron Sigma
  alpha-search alpha_search_<algorithm>.csv
               columns: algorithm,K,lower,upper,alpha_inf,iterations_at_0.2_alpha_inf,seeds,degenerate
               probes_<algorithm>.csv columns: algorithm,K,seed,alpha,status,steps
  k-scaling    k_scaling.txt (fit coefficients, R^2, Linear-CTD flatness ratio)
  verify       verify.csv columns: K,check,status,value,sense,bound,margin,tolerance
  plot         SVG with one series per (K, algorithm); seeds are averaged

threads: --threads N, else $DISTRIB_TD_THREADS, else 1.
"""


def _build_parser():
    p = argparse.ArgumentParser(prog="distrib-td", description="Linear categorical TD experiments",
                                epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int, help="single learner seed (overrides the config seed list)")
        sp.add_argument("--seeds", help="comma-separated learner seeds")
        sp.add_argument("--model-seed", type=int, help="seed of the generated MDP")
        sp.add_argument("--threads", type=int, help="worker processes")
        sp.add_argument("--algorithm", choices=ex.ALGORITHMS)
        sp.add_argument("--k-list", help="comma-separated K values")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--alpha-range", help="LO:HI bisection bracket")
        sp.add_argument("--epsilon", type=float, help="convergence threshold (default 2e-6)")
        sp.add_argument("--max-iter", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--mode", choices=("generative", "markovian"))
        sp.epilog = CSV_HELP
        sp.formatter_class = argparse.RawDescriptionHelpFormatter

    for name, helptext in (("run", "learning curves for every K and seed"),
                           ("alpha-search", "bisect the largest convergent step size"),
                           ("k-scaling", "quadratic fit of 1/alpha_inf against K"),
                           ("verify", "structural and stability checks")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        if name == "verify":
            sp.add_argument("--feature-scale", type=float,
                            help="multiply features by this factor (values > 1 break the norm assumption)")
    sp = sub.add_parser("plot", help="SVG loss curves from run traces")
    sp.add_argument("traces", nargs="*", help="trace CSV files")
    sp.add_argument("--out", default="loss.svg", help="output SVG path")
    sp.add_argument("--title", default="")
    return p


def _config(args):
    def ints(text):
        return None if text is None else ex._parse_int_list(text)

    seeds = (args.seed,) if args.seed is not None else ints(args.seeds)
    rng = None if args.alpha_range is None else ex._parse_range(args.alpha_range)
    return ex.load_config(
        args.config, algorithm=args.algorithm, k_list=ints(args.k_list), alpha=args.alpha, alpha_range=rng,
        epsilon=args.epsilon, max_iter=args.max_iter, batch=args.batch, mode=args.mode, seeds=seeds,
        model_seed=args.model_seed, feature_scale=getattr(args, "feature_scale", None))


def _cmd_run(args, cfg, threads):
    res = ex.cmd_run(cfg, threads)
    path = os.path.join(args.out, f"trace_{cfg.algorithm}.csv")
    ex.atomic_write(path, ex.csv_text(ex.TRACE_COLUMNS, res.rows, cfg))
    for (K, s), dv in sorted(res.diverged.items()):
        last = [r for r in res.rows if r[1] == K and r[2] == s][-1]
        status = "diverged" if dv else f"final plotted loss {last[7]:.3e}"
        print(f"K={K} seed={s}: {status}")
    print(f"max plotted-loss identity gap {res.identity_max_gap:.2e}")
    print(f"wrote {path}")
    return 0


def _cmd_alpha(args, cfg, threads):
    results = ex.cmd_alpha_search(cfg, threads)
    path = os.path.join(args.out, f"alpha_search_{cfg.algorithm}.csv")
    ex.atomic_write(path, ex.csv_text(ex.ALPHA_COLUMNS, [r.row() for r in results], cfg))
    probes = [p for r in results for p in r.probes]
    ex.atomic_write(os.path.join(args.out, f"probes_{cfg.algorithm}.csv"),
                    ex.csv_text(ex.PROBE_COLUMNS, probes, cfg))
    for r in results:
        print(f"{r.algorithm} K={r.K}: alpha_inf in [{r.lower:.4g}, {r.upper:.4g}]"
              + (" (threshold met at initialization)" if r.degenerate else ""))
    print(f"wrote {path}")
    return 0


def _cmd_scaling(args, cfg, threads):
    rep = ex.cmd_k_scaling(cfg, threads)
    path = os.path.join(args.out, "k_scaling.txt")
    text = "".join("# " + ln + "\n" for ln in cfg.to_text().splitlines()) + rep.text()
    ex.atomic_write(path, text)
    print(rep.text(), end="")
    return 0


def _cmd_verify(args, cfg, threads):
    checks = ex.cmd_verify(cfg, threads)
    path = os.path.join(args.out, "verify.csv")
    ex.atomic_write(path, ex.csv_text(ex.VERIFY_COLUMNS, [c.row() for c in checks], cfg))
    for c in checks:
        if c.status == "skip":
            print(f"SKIP K={c.K} {c.name} (needs K(1-gamma) >= 1)")
        else:
            print(f"{c.status.upper()} K={c.K} {c.name}: value={c.value:.6g} {c.sense} {c.bound:.6g} "
                  f"margin={c.margin:.3g} tol={c.tolerance:g}")
    failed = [c for c in checks if c.status == "fail"]
    skipped = sum(c.status == "skip" for c in checks)
    print(f"{len(checks)} checks: {len(checks) - len(failed) - skipped} passed, {len(failed)} failed, "
          f"{skipped} skipped")
    return 1 if failed else 0


def read_trace(path):
    """Rows of a run trace as dicts; malformed rows raise with their line number."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = None
    rows = []
    for no, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if header is None:
            if tuple(parts) != ex.TRACE_COLUMNS:
                raise ValueError(f"{path}: row {no}: unexpected header")
            header = parts
            continue
        if len(parts) != len(header):
            raise ValueError(f"{path}: row {no}: expected {len(header)} fields, got {len(parts)}")
        try:
            rows.append({"algorithm": parts[0], "K": int(parts[1]), "seed": int(parts[2]), "t": int(parts[4]),
                         "plotted_loss": float(parts[7])})
        except ValueError as exc:
            raise ValueError(f"{path}: row {no}: {exc}") from None
    if header is None:
        raise ValueError(f"{path}: row 1: missing header")
    return rows


def plot_traces(paths, title="") -> str:
    acc = defaultdict(lambda: defaultdict(list))
    for path in paths:
        for r in read_trace(path):
            acc[(r["K"], r["algorithm"])][r["t"]].append(r["plotted_loss"])
    series = []
    for (K, alg) in sorted(acc):
        ts = sorted(acc[(K, alg)])
        ys = []
        for t in ts:
            v = sum(acc[(K, alg)][t]) / len(acc[(K, alg)][t])
            ys.append(-math.log10(v) if 0 < v < math.inf else math.nan)
        series.append((f"{alg} K={K}", ts, ys))
    return line_plot(series, title=title, ylabel="-log10 plotted loss")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            svg = plot_traces(args.traces, args.title)
            ex.atomic_write(args.out, svg)
            print(f"wrote {args.out}")
            return 0
        cfg = _config(args)
        threads = ex.resolve_threads(args.threads)
        handler = {"run": _cmd_run, "alpha-search": _cmd_alpha, "k-scaling": _cmd_scaling,
                   "verify": _cmd_verify}[args.command]
        return handler(args, cfg, threads)
    except (ex.ConfigError, ex.SearchRangeError, ValueError, OSError) as exc:
        print(f"distrib-td: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
