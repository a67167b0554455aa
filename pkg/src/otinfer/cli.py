"""Command line front end.

Subcommands fall in two groups. The sample commands ``w2``, ``map`` and
``ci`` read point clouds from CSV files (one point per row, coordinates
in [0,1]) and print or write a single result. The study commands
``rates``, ``coverage`` and ``stability`` read a JSON config, run the
replicated experiment and write CSV/JSON reports plus a PNG figure into
the output directory; ``--no-figures`` skips the rendering.

Exit codes: 0 on success, 2 on configuration or input errors, 3 when a
numerical routine fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from otinfer.density import (build_order_kernel, haar_estimate,
                             kernel_estimate, tune_resolution)
from otinfer.discrete import solve_discrete_ot
from otinfer.domain import WeightedCloud
from otinfer.harness import (ConfigError, ExperimentConfig, _DEFAULT_ALPHA,
                             _haar_level, ci_from_clouds, run_coverage,
                             run_rates, run_stability, write_coverage,
                             write_rates, write_stability)
from otinfer.inference import ci_json
from otinfer.maps import estimate_1nn, estimate_convex_ls, estimate_density_plugin

__all__ = ["main", "run_cli"]


def _load_cloud(path, domain):
    pts = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    return WeightedCloud.uniform(pts, domain=domain)


def _metric(domain):
    return "torus-sq" if domain == "torus" else "euclidean-sq"


def _fit_margins(X, Y, kind, alpha, grid_m):
    # shared resolution for the pair, tuned at the smaller sample size
    if grid_m is None:
        raise ConfigError(f"{kind} needs --grid-m")
    a = _DEFAULT_ALPHA if alpha is None else float(alpha)
    n_fit = min(X.n, Y.n)
    if kind == "haar-map":
        J = _haar_level(n_fit, a, X.d, grid_m)
        return haar_estimate(X, J, grid_m), haar_estimate(Y, J, grid_m)
    if X.domain != "torus":
        raise ConfigError("kernel-map needs torus clouds")
    h = tune_resolution(n_fit, a, X.d, kind="kernel", M=grid_m)
    K = build_order_kernel(4)
    return kernel_estimate(X, h, K, grid_m), kernel_estimate(Y, h, K, grid_m)


def _cmd_w2(args):
    X = _load_cloud(args.x, args.domain)
    Y = _load_cloud(args.y, args.domain)
    w2, _, _ = ci_from_clouds(X, Y, plugin=args.plugin, level=args.level,
                              alpha=args.alpha, grid_m=args.grid_m)
    rec = {"w2sq": w2.value, "plugin": w2.kind, "n": w2.n, "m": w2.m}
    if w2.grid_m is not None:
        rec["grid_m"] = w2.grid_m
    print(json.dumps(rec))
    return 0


def _cmd_ci(args):
    X = _load_cloud(args.x, args.domain)
    Y = _load_cloud(args.y, args.domain)
    w2, var, ci = ci_from_clouds(X, Y, plugin=args.plugin, level=args.level,
                                 alpha=args.alpha, grid_m=args.grid_m)
    print(ci_json(w2, var, ci))
    return 0


def _cmd_map(args):
    X = _load_cloud(args.x, args.domain)
    Y = _load_cloud(args.y, args.domain)
    if args.estimator in ("1nn", "convex-ls"):
        coupling, _ = solve_discrete_ot(X, Y, metric=_metric(args.domain))
        if args.estimator == "1nn":
            est = estimate_1nn(X, Y, coupling)
        else:
            if args.lam is None:
                raise ConfigError("convex-ls needs --lambda")
            est = estimate_convex_ls(X, Y, coupling, args.lam)
    elif args.estimator in ("haar-map", "kernel-map"):
        phat, qhat = _fit_margins(X, Y, args.estimator, args.alpha, args.grid_m)
        est = estimate_density_plugin(phat, qhat)
    else:
        raise ConfigError(
            "estimator 'semidiscrete' needs an analytic source; "
            "run it through the rates experiment instead")
    text = est.to_json()
    if args.out is None:
        print(text)
    else:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text + "\n")
        print(args.out)
    return 0


def _cmd_study(args):
    cfg = ExperimentConfig.from_file(args.config)
    if cfg.experiment != args.command:
        raise ConfigError(
            f"config declares experiment {cfg.experiment!r}, "
            f"invoked as {args.command!r}")
    out_dir = args.out if args.out is not None else cfg.out
    if out_dir is None:
        raise ConfigError("no output directory: set --out or the config 'out' key")
    os.makedirs(out_dir, exist_ok=True)

    if args.command == "rates":
        result = run_rates(cfg)
        paths = write_rates(result, out_dir)
    elif args.command == "coverage":
        result = run_coverage(cfg)
        paths = write_coverage(result, out_dir)
    else:
        result = run_stability(cfg)
        paths = write_stability(result, out_dir)

    written = sorted(paths.values())
    if not args.no_figures:
        from otinfer import figures
        render = {"rates": figures.render_rates,
                  "coverage": figures.render_coverage,
                  "stability": figures.render_stability}[args.command]
        written.append(render(result, out_dir))
    for p in written:
        print(p)
    return 0


def _add_cloud_args(sub, plugin=True):
    sub.add_argument("--x", required=True, help="CSV of source points")
    sub.add_argument("--y", required=True, help="CSV of target points")
    sub.add_argument("--domain", choices=("cube", "torus"), default="cube")
    sub.add_argument("--alpha", type=float, default=None,
                     help="smoothness hint for resolution tuning")
    sub.add_argument("--grid-m", type=int, default=None, dest="grid_m",
                     help="grid resolution per axis for density plugins")
    if plugin:
        sub.add_argument("--plugin", choices=("empirical", "haar", "kernel"),
                         default="empirical")
        sub.add_argument("--level", type=float, default=0.95,
                         help="confidence level in [0, 1)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="otinfer",
        description="Optimal transport map estimation and W2^2 inference.")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("w2", help="plugin estimate of squared W2")
    _add_cloud_args(sub)

    sub = subs.add_parser("ci", help="confidence interval for squared W2")
    _add_cloud_args(sub)

    sub = subs.add_parser("map", help="fit a transport map from two clouds")
    _add_cloud_args(sub, plugin=False)
    sub.add_argument("--estimator", required=True,
                     choices=("1nn", "convex-ls", "haar-map", "kernel-map",
                              "semidiscrete"))
    sub.add_argument("--lambda", type=float, default=None, dest="lam",
                     help="curvature bound for convex-ls")
    sub.add_argument("--out", default=None, help="write the map JSON here")

    for name in ("rates", "coverage", "stability"):
        sub = subs.add_parser(name, help=f"run a {name} study from a config")
        sub.add_argument("--config", required=True, help="JSON config file")
        sub.add_argument("--out", default=None,
                         help="output directory (overrides the config)")
        sub.add_argument("--no-figures", action="store_true",
                         help="skip PNG rendering")

    return parser


_HANDLERS = {
    "w2": _cmd_w2,
    "ci": _cmd_ci,
    "map": _cmd_map,
    "rates": _cmd_study,
    "coverage": _cmd_study,
    "stability": _cmd_study,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - solver-dependent
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


run_cli = main


if __name__ == "__main__":
    sys.exit(main())
