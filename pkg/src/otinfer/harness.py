"""Experiment driver: rate slopes, interval coverage, sandwich audits.

Experiments are described by a small JSON config and run as replications
keyed by (n, rep).  Each replication derives its random stream from a
hash of (base seed, n, rep), and aggregation is a deterministic fold in
(n, rep) order, so the delimited outputs are byte-identical across
thread counts and re-runs; wall-clock columns are the one exception.

The one-dimensional scoring oracles live here too: closed-form quantile
costs against the uniform source, per-interval quadrature against the
family's target quantile curve, and quadrature means of the closed-form
potentials.  The sandwich audits are built entirely from these, never
from the solver under test.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, fields

import numpy as np

from otinfer.density import (
    build_order_kernel,
    exact_density,
    haar_estimate,
    kernel_estimate,
    tune_resolution,
)
from otinfer.discrete import solve_discrete_ot
from otinfer.domain import Rng, make_ground_truth, sample
from otinfer.inference import (
    ConfidenceInterval,
    W2Estimate,
    confidence_interval,
    extract_potentials,
    plugin_w2sq,
    variance_estimates,
)
from otinfer.maps import (
    estimate_1nn,
    estimate_convex_ls,
    estimate_density_plugin,
    estimate_semidiscrete,
    l2p_risk,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RateResult",
    "CoverageResult",
    "StabilityResult",
    "run_rates",
    "run_coverage",
    "run_stability",
    "ci_from_clouds",
    "fit_loglog_slope",
    "w2sq_uniform_vs_atoms",
    "w2sq_target_vs_atoms",
    "potential_means",
    "write_rates",
    "write_coverage",
    "write_stability",
]

_EXPERIMENTS = ("rates", "coverage", "stability", "w2", "map", "ci")
_MAP_ESTIMATORS = ("semidiscrete", "1nn", "convex-ls", "haar-map", "kernel-map")
_PLUGIN_ESTIMATORS = ("empirical-plugin", "haar-plugin", "kernel-plugin")
_STABILITY_MODES = ("empirical", "haar", "exact-grid", "two-sample")

_CONFIG_KEYS = (
    "experiment", "family", "estimator", "n_list", "m_rule", "reps",
    "seed", "threads", "grid_m", "alpha", "lambda", "level", "out",
)

_RISK_FLOOR = 1e-12          # below this, log-log slopes are meaningless
_RISK_NODES_1D = 2048
_RISK_MC = 32768
_DEFAULT_ALPHA = 2.0
_KERNEL_ORDER = 4

_RATES_COLUMNS = ("estimator", "d", "alpha", "n", "rep", "seed", "risk_l2p",
                  "w2sq_hat", "w2sq_true", "delta_nm", "runtime_ms")
_COVERAGE_COLUMNS = ("n", "rep", "seed", "w2sq_hat", "sigma0_sq", "sigma1_sq",
                     "pooled_sq", "lo", "hi", "width", "covered")
_STABILITY_COLUMNS = ("rep", "w2_plugin", "w2_true", "lin_term",
                      "lower_residual", "upper_residual", "lambda")


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 2)."""


# ----------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment run.

    Mirrors the JSON config file key for key; `lambda` is spelled `lam`
    here because of the Python keyword.  Unset optional fields stay None
    and each runner checks for the ones it needs.
    """

    experiment: str
    family: str
    estimator: str | None = None
    n_list: tuple[int, ...] | None = None
    m_rule: object = "equal"
    reps: int = 1
    seed: int = 0
    threads: int = 1
    grid_m: int | None = None
    alpha: float | None = None
    lam: float | None = None
    level: float = 0.95
    out: str | None = None

    def __post_init__(self):
        if self.experiment not in _EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment {self.experiment!r}, "
                f"expected one of {_EXPERIMENTS}")
        if not isinstance(self.family, str) or not self.family:
            raise ConfigError("family must be a nonempty string")
        if self.n_list is not None:
            ns = tuple(int(v) for v in self.n_list)
            if len(ns) == 0 or any(v < 1 for v in ns):
                raise ConfigError("n_list entries must be positive")
            if any(b <= a for a, b in zip(ns, ns[1:])):
                raise ConfigError("n_list must be strictly increasing")
            object.__setattr__(self, "n_list", ns)
        if self.m_rule != "equal":
            try:
                m = int(self.m_rule)
            except (TypeError, ValueError):
                raise ConfigError(
                    "m_rule must be 'equal' or a positive integer") from None
            if m < 1:
                raise ConfigError("m_rule must be 'equal' or a positive integer")
            object.__setattr__(self, "m_rule", m)
        if int(self.reps) < 1:
            raise ConfigError("reps must be at least 1")
        object.__setattr__(self, "reps", int(self.reps))
        object.__setattr__(self, "seed", int(self.seed))
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")
        object.__setattr__(self, "threads", int(self.threads))
        if self.grid_m is not None:
            if int(self.grid_m) < 2:
                raise ConfigError("grid_m must be at least 2")
            object.__setattr__(self, "grid_m", int(self.grid_m))
        if self.alpha is not None and not float(self.alpha) > 1.0:
            raise ConfigError("alpha must exceed 1")
        if self.lam is not None and not float(self.lam) >= 1.0:
            raise ConfigError("lambda must be at least 1")
        if not 0.0 <= float(self.level) < 1.0:
            raise ConfigError("level must lie in [0, 1)")

    @classmethod
    def from_dict(cls, payload):
        """Build from a parsed JSON object, rejecting unknown keys."""
        if not isinstance(payload, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(payload) - set(_CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "experiment" not in payload or "family" not in payload:
            raise ConfigError("config requires 'experiment' and 'family'")
        kwargs = {("lam" if k == "lambda" else k): v
                  for k, v in payload.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(payload)

    def to_dict(self):
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = list(val)
            out[key] = val
        return out


def _family(cfg):
    try:
        return make_ground_truth(cfg.family)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _rep_sizes(cfg, n):
    return n, (n if cfg.m_rule == "equal" else int(cfg.m_rule))


def _alpha(cfg):
    return _DEFAULT_ALPHA if cfg.alpha is None else float(cfg.alpha)


def _haar_level(n, alpha, d, M):
    # the level must keep 2^J a divisor of the grid resolution
    J = tune_resolution(n, alpha, d, kind="wavelet")
    J_max = (M & -M).bit_length() - 1
    if J_max < 1:
        raise ConfigError(f"grid_m={M} is odd; dyadic estimates need 2 | M")
    return min(J, J_max)


# ----------------------------------------------------------------------
# one-dimensional scoring oracles


def _sorted_atoms(atoms, weights):
    atoms = np.asarray(atoms, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    order = np.argsort(atoms, kind="stable")
    a = atoms[order]
    hi = np.cumsum(weights[order])
    hi[-1] = 1.0
    lo = hi - weights[order]
    return a, lo, hi


def w2sq_uniform_vs_atoms(atoms, weights):
    """Exact W2^2 between U[0,1] and a discrete 1D measure.

    The quantile function of the atoms is a step function, so the
    quantile-coupling integral splits into per-step cubics.
    """
    a, lo, hi = _sorted_atoms(atoms, weights)
    return float((((hi - a) ** 3 - (lo - a) ** 3) / 3.0).sum())


def w2sq_target_vs_atoms(gt, atoms, weights, order=16):
    """W2^2 between a 1D family's target law and a discrete measure.

    Integrates (T0(u) - a_i)^2 over each quantile step with fixed-order
    Gauss-Legendre nodes; the integrand is analytic, so the panels are
    exact to machine precision at any step width.
    """
    if gt.d != 1 or gt.domain != "cube":
        raise ValueError("quantile oracle needs a 1D cube family")
    a, lo, hi = _sorted_atoms(atoms, weights)
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    u = lo[:, None] + (hi - lo)[:, None] * t[None, :]
    vals = (gt.t0(u) - a[:, None]) ** 2
    return float(((hi - lo) * (vals @ w)).sum())


def potential_means(gt, order=200):
    """(E_P[phi0], E_Q[psi0]) for a 1D cube family, by quadrature."""
    if gt.d != 1 or gt.domain != "cube":
        raise ValueError("potential means need a 1D cube family")
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    phi_mean = float(np.dot(w, gt.phi_k(x[:, None])))
    psi_mean = float(np.dot(w, gt.psi_k(gt.t0(x)[:, None])))
    return phi_mean, psi_mean


def _sorted_pair_cost(X, Y):
    # exact two-sample plugin cost in 1D with equal uniform weights
    xs = np.sort(X.points[:, 0])
    ys = np.sort(Y.points[:, 0])
    return float(np.mean((xs - ys) ** 2))


# ----------------------------------------------------------------------
# replication pool


def _run_pool(task, keys, threads):
    if threads <= 1:
        return {key: task(*key) for key in keys}
    out = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(task, *key): key for key in keys}
        for fut in as_completed(futures):
            out[futures[fut]] = fut.result()
    return out


# ----------------------------------------------------------------------
# rates


@dataclass(frozen=True)
class RateResult:
    """Replication table plus the fitted log2-log2 risk slope."""

    estimator: str
    d: int
    alpha: float | None
    n_values: tuple[int, ...]
    mean_risk: tuple[float, ...]
    se_risk: tuple[float, ...]
    slope: float | None
    slope_se: float | None
    degenerate: bool
    target_exponent: float
    rows: tuple[dict, ...]

    @property
    def n_range(self):
        return (self.n_values[0], self.n_values[-1])


def fit_loglog_slope(n_values, means):
    """OLS slope of log2(mean) on log2(n) with its standard error.

    Returns (slope, se, degenerate); the fit is refused (None, None)
    when fewer than three sizes are given, and flagged degenerate when
    any mean sits at or below the risk floor, where logs are noise.
    """
    ns = np.asarray(n_values, dtype=float)
    means = np.asarray(means, dtype=float)
    if (means <= _RISK_FLOOR).any():
        return None, None, True
    if ns.size < 3:
        return None, None, False
    x = np.log2(ns)
    y = np.log2(means)
    xc = x - x.mean()
    slope = float(np.dot(xc, y) / np.dot(xc, xc))
    resid = y - y.mean() - slope * xc
    dof = ns.size - 2
    se = float(np.sqrt((resid @ resid) / dof / np.dot(xc, xc)))
    return slope, se, False


def _target_exponent(kind, d):
    # map risks decay like n^(-2/d) once d >= 3 and parametrically below;
    # plugin distance errors hit the n^(-1/2) fluctuation floor instead
    if kind in _MAP_ESTIMATORS:
        return max(-1.0, -2.0 / d)
    return max(-0.5, -2.0 / d)


def _check_estimator(cfg, gt):
    kind = cfg.estimator
    if kind is None:
        raise ConfigError("rates experiments need an estimator")
    if kind not in _MAP_ESTIMATORS + _PLUGIN_ESTIMATORS:
        raise ConfigError(f"unknown estimator {kind!r}")
    if kind.startswith("kernel") and gt.domain != "torus":
        raise ConfigError(
            f"estimator {kind!r} needs a torus family, got {cfg.family!r}")
    if kind == "convex-ls":
        if gt.domain != "cube":
            raise ConfigError("convex-ls runs on cube families only")
        if cfg.lam is None:
            raise ConfigError("convex-ls needs lambda")
    if kind in ("semidiscrete", "haar-map", "kernel-map",
                "haar-plugin", "kernel-plugin") and cfg.grid_m is None:
        raise ConfigError(f"estimator {kind!r} needs grid_m")


def _rates_rep(cfg, gt, kernel, n, rep):
    kind = cfg.estimator
    rng = Rng(cfg.seed, 0).child(n, rep)
    n_src, m = _rep_sizes(cfg, n)
    t_start = time.perf_counter()
    risk = None
    delta_nm = None
    n_eval = _RISK_NODES_1D if gt.d == 1 else _RISK_MC

    def score(that):
        return l2p_risk(that, gt, n_eval, rng.child("eval")).value

    if kind == "semidiscrete":
        Y = sample(gt, "target", n_src, rng.child("y"))
        that = estimate_semidiscrete(gt, Y, cfg.grid_m)
        w2hat = that.objective
        delta_nm = w2hat
        risk = score(that)
    elif kind in ("1nn", "convex-ls"):
        X = sample(gt, "source", n_src, rng.child("x"))
        Y = sample(gt, "target", m, rng.child("y"))
        coupling, _ = solve_discrete_ot(
            X, Y, metric="torus-sq" if gt.domain == "torus" else "euclidean-sq")
        w2hat = max(coupling.cost, 0.0)
        delta_nm = w2hat
        if kind == "1nn":
            that = estimate_1nn(X, Y, coupling)
        else:
            that = estimate_convex_ls(X, Y, coupling, cfg.lam)
        risk = score(that)
    elif kind in ("haar-map", "kernel-map"):
        X = sample(gt, "source", n_src, rng.child("x"))
        Y = sample(gt, "target", m, rng.child("y"))
        if kind == "haar-map":
            J = _haar_level(min(n_src, m), _alpha(cfg), gt.d, cfg.grid_m)
            px = haar_estimate(X, J, cfg.grid_m)
            qy = haar_estimate(Y, J, cfg.grid_m)
        else:
            h = tune_resolution(min(n_src, m), _alpha(cfg), gt.d,
                                kind="kernel", M=cfg.grid_m)
            px = kernel_estimate(X, h, kernel, cfg.grid_m)
            qy = kernel_estimate(Y, h, kernel, cfg.grid_m)
        that = estimate_density_plugin(px, qy)
        w2hat = that.objective
        delta_nm = w2hat
        risk = score(that)
    else:
        X = sample(gt, "source", n_src, rng.child("x"))
        Y = sample(gt, "target", m, rng.child("y"))
        if kind == "empirical-plugin":
            w2hat = plugin_w2sq(X, Y).value
        elif kind == "haar-plugin":
            J = _haar_level(min(n_src, m), _alpha(cfg), gt.d, cfg.grid_m)
            w2hat = plugin_w2sq(haar_estimate(X, J, cfg.grid_m),
                                haar_estimate(Y, J, cfg.grid_m)).value
        else:
            h = tune_resolution(min(n_src, m), _alpha(cfg), gt.d,
                                kind="kernel", M=cfg.grid_m)
            w2hat = plugin_w2sq(kernel_estimate(X, h, kernel, cfg.grid_m),
                                kernel_estimate(Y, h, kernel, cfg.grid_m)).value

    runtime_ms = (time.perf_counter() - t_start) * 1e3
    return {
        "estimator": kind,
        "d": gt.d,
        "alpha": cfg.alpha,
        "n": n,
        "rep": rep,
        "seed": rng.stream,
        "risk_l2p": risk,
        "w2sq_hat": w2hat,
        "w2sq_true": gt.w2sq,
        "delta_nm": delta_nm,
        "runtime_ms": runtime_ms,
        # slope metric: map risk when available, plugin deviation otherwise
        "_risk": risk if risk is not None else abs(w2hat - gt.w2sq),
    }


def run_rates(cfg):
    """Sample, fit, and score an estimator over a grid of sample sizes.

    Every (n, rep) cell draws fresh clouds from its derived stream, fits
    the configured estimator, and records the squared map risk or the
    plugin distance deviation; the per-size means feed an OLS slope fit
    in log2-log2 coordinates.
    """
    if cfg.experiment != "rates":
        raise ConfigError(f"config describes {cfg.experiment!r}, not rates")
    gt = _family(cfg)
    _check_estimator(cfg, gt)
    if cfg.n_list is None:
        raise ConfigError("rates experiments need n_list")
    kernel = (build_order_kernel(_KERNEL_ORDER)
              if cfg.estimator.startswith("kernel") else None)

    keys = [(n, rep) for n in cfg.n_list for rep in range(cfg.reps)]
    records = _run_pool(
        lambda n, rep: _rates_rep(cfg, gt, kernel, n, rep), keys, cfg.threads)

    rows = []
    means = []
    ses = []
    for n in cfg.n_list:
        vals = np.empty(cfg.reps)
        for rep in range(cfg.reps):
            rec = records[(n, rep)]
            vals[rep] = rec.pop("_risk")
            rows.append(rec)
        means.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / np.sqrt(cfg.reps))
                   if cfg.reps > 1 else 0.0)

    slope, slope_se, degenerate = fit_loglog_slope(cfg.n_list, means)
    return RateResult(
        estimator=cfg.estimator,
        d=gt.d,
        alpha=cfg.alpha,
        n_values=tuple(cfg.n_list),
        mean_risk=tuple(means),
        se_risk=tuple(ses),
        slope=slope,
        slope_se=slope_se,
        degenerate=degenerate,
        target_exponent=_target_exponent(cfg.estimator, gt.d),
        rows=tuple(rows),
    )


# ----------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageResult:
    """Per-replication interval table with coverage and width summaries."""

    plugin: str
    level: float
    n_values: tuple[int, ...]
    w2sq_true: float
    coverage: dict
    mean_width: dict
    rows: tuple[dict, ...]


def ci_from_clouds(X, Y, plugin="empirical", level=0.95, alpha=None,
                   grid_m=None):
    """Plugin estimate, potential variances, and interval in one pass.

    Density plugins fit on the two clouds at a shared resolution, solve
    the grid problem once, and evaluate the potentials back at the
    original samples through the conjugation closures, so the variances
    are always taken under the uniform empirical measures.
    """
    metric = "torus-sq" if X.domain == "torus" else "euclidean-sq"
    if plugin == "empirical":
        solution = solve_discrete_ot(X, Y, metric=metric)
        coupling = solution[0]
        w2 = W2Estimate(value=max(coupling.cost, 0.0), kind="empirical",
                        n=X.n, m=Y.n)
        pots = extract_potentials(solution, X, Y)
        phi_vals, psi_vals = pots.phi, pots.psi
    elif plugin in ("haar", "kernel"):
        if grid_m is None:
            raise ConfigError(f"{plugin} plugin needs grid_m")
        a = _DEFAULT_ALPHA if alpha is None else float(alpha)
        n_fit = min(X.n, Y.n)
        if plugin == "haar":
            J = _haar_level(n_fit, a, X.d, grid_m)
            px = haar_estimate(X, J, grid_m)
            qy = haar_estimate(Y, J, grid_m)
        else:
            if X.domain != "torus":
                raise ConfigError("kernel plugin needs a torus family")
            h = tune_resolution(n_fit, a, X.d, kind="kernel", M=grid_m)
            kernel = build_order_kernel(_KERNEL_ORDER)
            px = kernel_estimate(X, h, kernel, grid_m)
            qy = kernel_estimate(Y, h, kernel, grid_m)
        mu = px.to_cloud()
        nu = qy.to_cloud()
        solution = solve_discrete_ot(mu, nu, metric=metric)
        coupling = solution[0]
        w2 = W2Estimate(value=max(coupling.cost, 0.0), kind=plugin,
                        n=X.n, m=Y.n, grid_m=grid_m)
        pots = extract_potentials(solution, mu, nu)
        phi_vals = pots.phi_fn(X.points)
        psi_vals = pots.psi_fn(Y.points)
    else:
        raise ConfigError(f"unknown plugin {plugin!r}")

    var = variance_estimates(phi_vals, psi_vals)
    delta = 1.0 - level
    if delta >= 1.0:
        # boundary level 0: the interval collapses to its center
        ci = ConfidenceInterval(center=w2.value, half_width=0.0, level=0.0,
                                n=X.n, m=Y.n, degenerate=True)
    else:
        ci = confidence_interval(w2, var, delta)
    return w2, var, ci


def _coverage_rep(cfg, gt, n, rep):
    rng = Rng(cfg.seed, 0).child(n, rep)
    n_src, m = _rep_sizes(cfg, n)
    X = sample(gt, "source", n_src, rng.child("x"))
    Y = sample(gt, "target", m, rng.child("y"))
    plugin = cfg.estimator or "empirical"
    w2, var, ci = ci_from_clouds(X, Y, plugin=plugin, level=cfg.level,
                                 alpha=cfg.alpha, grid_m=cfg.grid_m)
    covered = int(ci.lo <= gt.w2sq <= ci.hi)
    return {
        "n": n,
        "rep": rep,
        "seed": rng.stream,
        "w2sq_hat": w2.value,
        "sigma0_sq": var.sigma0_sq,
        "sigma1_sq": var.sigma1_sq,
        "pooled_sq": var.pooled_sq,
        "lo": ci.lo,
        "hi": ci.hi,
        "width": 2.0 * ci.half_width,
        "covered": covered,
    }


def run_coverage(cfg):
    """Monte Carlo coverage of the asymptotic interval on a known family.

    Requires a family with P != Q; at P = Q the limit is degenerate and
    the interval has no coverage target.
    """
    if cfg.experiment != "coverage":
        raise ConfigError(f"config describes {cfg.experiment!r}, not coverage")
    gt = _family(cfg)
    if gt.w2sq <= 0.0:
        raise ConfigError(
            "CLT degenerate: coverage needs a family with P != Q")
    if cfg.n_list is None:
        raise ConfigError("coverage experiments need n_list")
    plugin = cfg.estimator or "empirical"
    if plugin not in ("empirical", "haar", "kernel"):
        raise ConfigError(f"unknown plugin {plugin!r} for coverage")

    keys = [(n, rep) for n in cfg.n_list for rep in range(cfg.reps)]
    records = _run_pool(
        lambda n, rep: _coverage_rep(cfg, gt, n, rep), keys, cfg.threads)

    rows = []
    coverage = {}
    mean_width = {}
    for n in cfg.n_list:
        hits = np.empty(cfg.reps)
        widths = np.empty(cfg.reps)
        for rep in range(cfg.reps):
            rec = records[(n, rep)]
            hits[rep] = rec["covered"]
            widths[rep] = rec["width"]
            rows.append(rec)
        coverage[n] = float(hits.mean())
        mean_width[n] = float(widths.mean())

    return CoverageResult(plugin=plugin, level=cfg.level,
                          n_values=tuple(cfg.n_list), w2sq_true=gt.w2sq,
                          coverage=coverage, mean_width=mean_width,
                          rows=tuple(rows))


# ----------------------------------------------------------------------
# stability


@dataclass(frozen=True)
class StabilityResult:
    """Sandwich audit rows with the worst residuals across replications."""

    mode: str
    n: int
    lam: float
    min_lower: float
    min_upper: float
    se_lin: float
    rows: tuple[dict, ...]


def _stability_rep(cfg, gt, mode, n, lam, psi_mean, phi_mean, rep):
    rng = Rng(cfg.seed, 0).child(n, rep)
    if mode == "two-sample":
        X = sample(gt, "source", n, rng.child("x"))
        Y = sample(gt, "target", n, rng.child("y"))
        w2_plugin = _sorted_pair_cost(X, Y)
        lin = (float(gt.phi_k(X.points).mean()) - phi_mean) \
            + (float(gt.psi_k(Y.points).mean()) - psi_mean)
        lower = w2_plugin - gt.w2sq - lin
        p_dist = w2sq_uniform_vs_atoms(X.points, X.weights)
        q_dist = w2sq_target_vs_atoms(gt, Y.points, Y.weights)
        upper = lam * (np.sqrt(p_dist) + np.sqrt(q_dist)) ** 2 - lower
    else:
        if mode == "empirical":
            Y = sample(gt, "target", n, rng.child("y"))
            atoms, weights = Y.points, Y.weights
        elif mode == "haar":
            Y = sample(gt, "target", n, rng.child("y"))
            J = _haar_level(n, _alpha(cfg), 1, cfg.grid_m)
            cloud = haar_estimate(Y, J, cfg.grid_m).to_cloud()
            atoms, weights = cloud.points, cloud.weights
        else:
            cloud = exact_density(gt, "target", cfg.grid_m).to_cloud()
            atoms, weights = cloud.points, cloud.weights
        w2_plugin = w2sq_uniform_vs_atoms(atoms, weights)
        psi_vals = gt.psi_k(atoms)
        lin = float(np.dot(weights.reshape(-1), psi_vals)) - psi_mean
        lower = w2_plugin - gt.w2sq - lin
        q_dist = w2sq_target_vs_atoms(gt, atoms, weights)
        upper = lam * q_dist - lower
    return {
        "rep": rep,
        "w2_plugin": w2_plugin,
        "w2_true": gt.w2sq,
        "lin_term": lin,
        "lower_residual": lower,
        "upper_residual": upper,
        "lambda": lam,
    }


def run_stability(cfg):
    """Audit the stability sandwich with independent 1D oracles.

    One-sample modes bound W2^2(P, Qhat) - W2^2(P, Q) between the linear
    potential term and its lambda-weighted quadratic correction; the
    two-sample mode audits the analogous bound for a pair of empirical
    plugins.  Every term comes from closed forms or quadrature, so a
    negative residual beyond tolerance indicts the inequality itself,
    not the transport solver.
    """
    if cfg.experiment != "stability":
        raise ConfigError(f"config describes {cfg.experiment!r}, not stability")
    gt = _family(cfg)
    if gt.d != 1 or gt.domain != "cube":
        raise ConfigError("stability audits need a 1D cube family")
    mode = cfg.estimator or "empirical"
    if mode not in _STABILITY_MODES:
        raise ConfigError(f"unknown stability mode {mode!r}")
    if mode in ("haar", "exact-grid") and cfg.grid_m is None:
        raise ConfigError(f"stability mode {mode!r} needs grid_m")
    if cfg.n_list is None or len(cfg.n_list) != 1:
        raise ConfigError("stability experiments need n_list with one size")
    n = cfg.n_list[0]
    lam = float(cfg.lam) if cfg.lam is not None else gt.lam
    phi_mean, psi_mean = potential_means(gt)

    keys = [(rep,) for rep in range(cfg.reps)]
    records = _run_pool(
        lambda rep: _stability_rep(cfg, gt, mode, n, lam, psi_mean,
                                   phi_mean, rep),
        keys, cfg.threads)
    rows = [records[(rep,)] for rep in range(cfg.reps)]

    if mode == "two-sample":
        se_lin = float(np.sqrt(gt.var_phi / n + gt.var_psi / n))
    else:
        se_lin = float(np.sqrt(gt.var_psi / n))
    return StabilityResult(
        mode=mode,
        n=n,
        lam=lam,
        min_lower=min(r["lower_residual"] for r in rows),
        min_upper=min(r["upper_residual"] for r in rows),
        se_lin=se_lin,
        rows=tuple(rows),
    )


# ----------------------------------------------------------------------
# delimited output


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def _write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in columns))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _write_json(path, payload):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return path


def write_rates(result, out_dir):
    """rates.csv (one row per replication) plus slopes.json."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = _write_csv(os.path.join(out_dir, "rates.csv"),
                          _RATES_COLUMNS, result.rows)
    slopes = {
        "estimator": result.estimator,
        "slope": result.slope,
        "slope_se": result.slope_se,
        "n_range": list(result.n_range),
        "target_exponent": result.target_exponent,
        "degenerate": result.degenerate,
    }
    json_path = _write_json(os.path.join(out_dir, "slopes.json"), slopes)
    return {"rates_csv": csv_path, "slopes_json": json_path}


def write_coverage(result, out_dir):
    """coverage.csv plus the aggregated coverage.json."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = _write_csv(os.path.join(out_dir, "coverage.csv"),
                          _COVERAGE_COLUMNS, result.rows)
    payload = {
        "plugin": result.plugin,
        "level": result.level,
        "coverage": {str(n): result.coverage[n] for n in result.n_values},
        "mean_width": {str(n): result.mean_width[n] for n in result.n_values},
    }
    json_path = _write_json(os.path.join(out_dir, "coverage.json"), payload)
    return {"coverage_csv": csv_path, "coverage_json": json_path}


def write_stability(result, out_dir):
    """stability.csv plus the residual summary stability.json."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = _write_csv(os.path.join(out_dir, "stability.csv"),
                          _STABILITY_COLUMNS, result.rows)
    payload = {
        "mode": result.mode,
        "n": result.n,
        "lambda": result.lam,
        "min_lower_residual": result.min_lower,
        "min_upper_residual": result.min_upper,
        "se_lin": result.se_lin,
    }
    json_path = _write_json(os.path.join(out_dir, "stability.json"), payload)
    return {"stability_csv": csv_path, "stability_json": json_path}
