"""Squared Wasserstein plugins, dual potentials, and asymptotic intervals.

The plugin estimate is the exact discrete transport cost between two fitted
measures (empirical clouds or density-weighted grids).  Its fluctuations
are asymptotically normal when the underlying laws differ, with variance
driven by the Kantorovich potentials; the potential values at the sample
points are read off the LP duals, their variances are pooled, and the
normal quantile gives the interval half-width.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from otinfer.density import DensityEstimate
from otinfer.discrete import c_transform, solve_discrete_ot
from otinfer.domain import WeightedCloud

__all__ = [
    "W2Estimate",
    "Potentials",
    "VarianceEstimates",
    "ConfidenceInterval",
    "plugin_w2sq",
    "extract_potentials",
    "variance_estimates",
    "confidence_interval",
    "poincare_ratio",
    "ci_json",
]

# pooled deviations below this are treated as the degenerate identical-law
# regime, where the normal limit does not apply
_DEGENERATE_SD = 1e-12


@dataclass(frozen=True)
class W2Estimate:
    """Plugin estimate of the squared 2-Wasserstein distance.

    `kind` names the plugin pair that produced it; `n` and `m` are the
    underlying sample sizes when known (a density estimate remembers the
    sample it was fitted on; an exact discretized density has none).
    """

    value: float
    kind: str
    n: int | None
    m: int | None
    grid_m: int | None = None

    def __post_init__(self):
        if self.value < 0.0:
            raise ValueError("squared distance cannot be negative")


@dataclass(frozen=True)
class Potentials:
    """Dual potential values at the samples plus off-sample evaluators.

    phi and psi are the LP duals normalized so max(phi) = 0.  The closures
    extend them by conjugation: phi_fn(x) = min_j c(x, Y_j) - psi_j and
    symmetrically, the tightest extension consistent with feasibility.
    """

    phi: np.ndarray
    psi: np.ndarray
    phi_fn: object
    psi_fn: object
    metric: str


@dataclass(frozen=True)
class VarianceEstimates:
    """Empirical potential variances and their pooled combination.

    sigma0_sq is the variance of the source potential values under the
    fitted source measure, sigma1_sq the target analogue, and pooled_sq
    the size-weighted mix (m sigma0_sq + n sigma1_sq) / (n + m).  The
    target side is None for one-sample problems.
    """

    sigma0_sq: float
    sigma1_sq: float | None
    pooled_sq: float | None
    n: int
    m: int | None

    def __post_init__(self):
        if self.sigma0_sq < 0.0:
            raise ValueError("variances cannot be negative")
        if self.sigma1_sq is not None and self.sigma1_sq < 0.0:
            raise ValueError("variances cannot be negative")


@dataclass(frozen=True)
class ConfidenceInterval:
    """Asymptotic (1 - delta) interval for the squared distance.

    `degenerate` flags pooled deviations at numerical zero (identical
    fitted laws), where the normal limit does not hold and the interval
    collapses to its center.
    """

    center: float
    half_width: float
    level: float
    n: int
    m: int | None
    degenerate: bool = False

    def __post_init__(self):
        if self.half_width < 0.0:
            raise ValueError("half-width cannot be negative")

    @property
    def lo(self):
        return self.center - self.half_width

    @property
    def hi(self):
        return self.center + self.half_width


def _as_cloud(member):
    """(cloud, kind, sample size, grid resolution) for either plugin type."""
    if isinstance(member, DensityEstimate):
        kind = member.provenance[0]
        if kind == "exact":
            kind = "exact-oracle"
        return member.to_cloud(), kind, member.n_sample, member.M
    if isinstance(member, WeightedCloud):
        return member, "empirical", member.n, None
    raise TypeError(f"cannot interpret {type(member).__name__} as a measure")


def plugin_w2sq(phat, qhat):
    """Exact squared transport cost between two fitted measures.

    Parameters
    ----------
    phat, qhat : WeightedCloud or DensityEstimate
        Fitted source and target measures on a common domain; density
        estimates are converted to their weighted grids.

    Returns
    -------
    W2Estimate
    """
    mu, kind_p, n, gm_p = _as_cloud(phat)
    nu, kind_q, m, gm_q = _as_cloud(qhat)
    if mu.domain != nu.domain:
        raise ValueError("plugin measures live on different domains")
    if gm_p is not None and gm_q is not None and gm_p != gm_q:
        raise ValueError(f"grid resolutions differ: {gm_p} vs {gm_q}")
    metric = "torus-sq" if mu.domain == "torus" else "euclidean-sq"
    coupling, _ = solve_discrete_ot(mu, nu, metric=metric)
    if kind_p == kind_q:
        kind = kind_p
    elif kind_p == "exact-oracle":
        kind = kind_q
    elif kind_q == "exact-oracle":
        kind = kind_p
    else:
        kind = f"{kind_p}/{kind_q}"
    return W2Estimate(value=max(coupling.cost, 0.0), kind=kind, n=n, m=m,
                      grid_m=gm_p if gm_p is not None else gm_q)


def extract_potentials(solution, X, Y):
    """Potential values at the samples plus conjugation closures.

    Parameters
    ----------
    solution : (Coupling, DualPotentials)
        Output of the discrete solve between X and Y.
    X, Y : WeightedCloud

    Returns
    -------
    Potentials
        phi at X and psi at Y, shifted so max(phi) = 0, with closures
        evaluating both potentials anywhere in the domain.
    """
    coupling, duals = solution
    metric = "torus-sq" if X.domain == "torus" else "euclidean-sq"
    if coupling.cost == 0.0:
        # zero cost means every coupled pair of atoms coincides, so the
        # zero pair is an optimal dual solution; the tree duals only carry
        # arbitrary degenerate offsets (phi_i = -psi_i) in that case
        phi = np.zeros(X.n)
        psi = np.zeros(Y.n)
    else:
        shift = duals.phi.max()
        phi = duals.phi - shift
        psi = duals.psi + shift

    def phi_fn(x):
        return c_transform(psi, Y, np.atleast_2d(x), metric)

    def psi_fn(y):
        return c_transform(phi, X, np.atleast_2d(y), metric)

    return Potentials(phi=phi, psi=psi, phi_fn=phi_fn, psi_fn=psi_fn,
                      metric=metric)


def variance_estimates(phi_vals, psi_vals=None):
    """Empirical variances of the potential values, pooled by size.

    Variances are taken under the fitted (uniform empirical) measures, so
    the estimates are invariant under the arbitrary additive normalization
    of the potentials.  Omit psi_vals for one-sample problems.

    Parameters
    ----------
    phi_vals : ndarray
        Source potential values at the n sample points.
    psi_vals : ndarray, optional
        Target potential values at the m sample points.

    Returns
    -------
    VarianceEstimates
    """
    phi_vals = np.asarray(phi_vals, dtype=np.float64)
    n = phi_vals.shape[0]
    if n < 2:
        raise ValueError("need at least 2 source values")
    s0 = float(np.var(phi_vals))
    if psi_vals is None:
        return VarianceEstimates(sigma0_sq=s0, sigma1_sq=None,
                                 pooled_sq=None, n=n, m=None)
    psi_vals = np.asarray(psi_vals, dtype=np.float64)
    m = psi_vals.shape[0]
    if m < 2:
        raise ValueError("need at least 2 target values")
    s1 = float(np.var(psi_vals))
    pooled = (m * s0 + n * s1) / (n + m)
    return VarianceEstimates(sigma0_sq=s0, sigma1_sq=s1, pooled_sq=pooled,
                             n=n, m=m)


def confidence_interval(w2, var, delta):
    """Asymptotic (1 - delta) interval around a plugin estimate.

    Two-sample half-width: pooled sigma times z_{delta/2} times
    sqrt((n + m) / (n m)).  One-sample problems (no target variance) use
    sigma0 z_{delta/2} / sqrt(n).

    Parameters
    ----------
    w2 : W2Estimate
    var : VarianceEstimates
    delta : float
        Miscoverage level in (0, 1).

    Returns
    -------
    ConfidenceInterval
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    n, m = var.n, var.m
    if n < 2 or (m is not None and m < 2):
        raise ValueError("need at least 2 points per sample")
    z = float(ndtri(1.0 - delta / 2.0))
    if m is None:
        sd = np.sqrt(var.sigma0_sq)
        half = sd * z / np.sqrt(n)
    else:
        sd = np.sqrt(var.pooled_sq)
        half = sd * z * np.sqrt((n + m) / (n * m))
    return ConfidenceInterval(center=w2.value, half_width=float(half),
                              level=1.0 - delta, n=n, m=m,
                              degenerate=bool(sd <= _DEGENERATE_SD))


def poincare_ratio(var, w2):
    """Diagnostic ratio Var[psi] over the squared-distance estimate.

    The target-potential variance is bounded by a constant multiple of the
    squared distance, so wildly large ratios indicate an inconsistent
    plugin pair.  Reported per experiment, never asserted (the constant is
    instance-dependent).
    """
    if var.sigma1_sq is None:
        return float("nan")
    if w2.value <= 0.0:
        return float("inf") if var.sigma1_sq > 0.0 else float("nan")
    return float(var.sigma1_sq / w2.value)


def ci_json(w2, var, ci):
    """Canonical JSON payload for a reported interval."""
    return json.dumps({
        "w2sq": w2.value,
        "sigma0sq": var.sigma0_sq,
        "sigma1sq": var.sigma1_sq,
        "sigma_pooled_sq": var.pooled_sq,
        "level": ci.level,
        "lo": ci.lo,
        "hi": ci.hi,
        "n": ci.n,
        "m": ci.m,
        "plugin": w2.kind,
    })
