"""Optimal transport map and squared Wasserstein distance estimation.

Exact discrete transport solves, semi-discrete / nearest-neighbor /
shape-constrained / density-plugin map estimators, plugin distance
estimates with asymptotic confidence intervals, and a reproducible
Monte Carlo harness that scores everything against analytic ground
truths.
"""

from otinfer.domain import (
    GroundTruth,
    Point,
    Rng,
    WeightedCloud,
    grid,
    make_ground_truth,
    sample,
    torus_distance,
)
from otinfer.discrete import (
    Coupling,
    DualPotentials,
    c_transform,
    displacement_cost,
    solve_discrete_ot,
)
from otinfer.density import (
    DensityEstimate,
    Kernel,
    build_order_kernel,
    dyadic_project,
    exact_density,
    haar_estimate,
    kernel_estimate,
    tune_resolution,
)
from otinfer.maps import (
    MapEstimate,
    RiskReport,
    estimate_1nn,
    estimate_convex_ls,
    estimate_density_plugin,
    estimate_semidiscrete,
    l2p_risk,
)
from otinfer.inference import (
    ConfidenceInterval,
    VarianceEstimates,
    W2Estimate,
    confidence_interval,
    extract_potentials,
    plugin_w2sq,
    variance_estimates,
)

__version__ = "0.1.0"

__all__ = [
    "GroundTruth",
    "Point",
    "Rng",
    "WeightedCloud",
    "grid",
    "make_ground_truth",
    "sample",
    "torus_distance",
    "Coupling",
    "DualPotentials",
    "c_transform",
    "displacement_cost",
    "solve_discrete_ot",
    "DensityEstimate",
    "Kernel",
    "build_order_kernel",
    "dyadic_project",
    "haar_estimate",
    "kernel_estimate",
    "tune_resolution",
    "MapEstimate",
    "RiskReport",
    "estimate_1nn",
    "estimate_convex_ls",
    "estimate_density_plugin",
    "estimate_semidiscrete",
    "l2p_risk",
    "ConfidenceInterval",
    "VarianceEstimates",
    "W2Estimate",
    "confidence_interval",
    "extract_potentials",
    "plugin_w2sq",
    "variance_estimates",
    "__version__",
]
