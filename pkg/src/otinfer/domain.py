"""Geometry on the unit cube and flat torus, seeded sampling, and analytic
ground-truth transport families used as oracles by every experiment."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DOMAINS = ("cube", "torus")

# Hard cap on the number of grid atoms (M^d) a single call may allocate.
GRID_CELL_CAP = 1 << 22


def _as_points_array(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError(f"points must be an (n, d) array, got shape {pts.shape}")
    return pts


def _check_domain(domain):
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}, expected one of {DOMAINS}")


@dataclass(frozen=True)
class Point:
    """A single point in [0,1]^d (cube) or [0,1)^d (torus representative)."""

    coords: np.ndarray
    domain: str = "cube"

    def __post_init__(self):
        _check_domain(self.domain)
        coords = np.atleast_1d(np.asarray(self.coords, dtype=float))
        if coords.ndim != 1:
            raise ValueError("Point coords must be one-dimensional")
        if self.domain == "torus":
            if np.any(coords < 0.0) or np.any(coords >= 1.0):
                raise ValueError("torus coordinates must lie in [0, 1)")
        else:
            if np.any(coords < 0.0) or np.any(coords > 1.0):
                raise ValueError("cube coordinates must lie in [0, 1]")
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)

    @property
    def d(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class WeightedCloud:
    """Finite point set with probability weights; the discrete face of a measure.

    Parameters
    ----------
    points : (n, d) array
        Point coordinates, in [0,1]^d for the cube, [0,1)^d for the torus.
    weights : (n,) array
        Nonnegative weights summing to 1 (tolerance 1e-12).
    domain : {"cube", "torus"}
    """

    points: np.ndarray
    weights: np.ndarray
    domain: str = "cube"

    def __post_init__(self):
        _check_domain(self.domain)
        pts = _as_points_array(self.points)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (pts.shape[0],):
            raise ValueError("weights must be a vector matching the number of points")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if self.domain == "torus":
            if np.any(pts < 0.0) or np.any(pts >= 1.0):
                raise ValueError("torus points must lie in [0, 1)^d")
        else:
            if np.any(pts < 0.0) or np.any(pts > 1.0):
                raise ValueError("cube points must lie in [0, 1]^d")
        pts.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points, domain="cube"):
        """Cloud with equal weights 1/n on the given points."""
        pts = _as_points_array(points)
        n = pts.shape[0]
        if n == 0:
            raise ValueError("cloud must contain at least one point")
        return cls(pts, np.full(n, 1.0 / n), domain)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream: identical (seed, stream) gives identical
    draws on every platform and under any scheduling of replications."""

    seed: int
    stream: int = 0

    def generator(self):
        key = np.array(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))

    @staticmethod
    def derive_stream(*parts):
        """First 8 bytes of sha256 over the canonical 'v1|part|...' string."""
        label = "v1|" + "|".join(str(p) for p in parts)
        digest = hashlib.sha256(label.encode("ascii")).digest()
        return int.from_bytes(digest[:8], "big")

    def child(self, *parts):
        """Substream labeled by the given parts (e.g. n, rep, 'x')."""
        return Rng(self.seed, Rng.derive_stream(self.stream, *parts))


def torus_distance(x, y):
    """Flat-torus distance min_{k in Z^d} ||x - y + k||.

    Accepts `Point`s (domain tags must both be "torus") or plain arrays of
    matching trailing dimension; broadcasting applies over leading axes.
    Representatives in [0,1)^d make the shift search over {-1,0,1}^d exact,
    which per-axis reduces to min(|dx|, 1 - |dx|).
    """
    if isinstance(x, Point) or isinstance(y, Point):
        if not (isinstance(x, Point) and isinstance(y, Point)):
            raise ValueError("cannot mix Point and raw coordinates")
        if x.domain != "torus" or y.domain != "torus":
            raise ValueError("torus_distance requires torus-tagged points")
        if x.d != y.d:
            raise ValueError("dimension mismatch")
        x, y = x.coords, y.coords
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    delta = np.abs(x - y)
    delta = np.minimum(delta, 1.0 - delta)
    return np.sqrt(np.sum(delta * delta, axis=-1))


def torus_sq_diff(x, y):
    """Per-axis squared wrapped differences, summed over the last axis."""
    delta = np.abs(np.asarray(x, float) - np.asarray(y, float))
    delta = np.minimum(delta, 1.0 - delta)
    return np.sum(delta * delta, axis=-1)


@lru_cache(maxsize=8)
def _gl_nodes(n=200):
    # Gauss-Legendre on [0,1]; integrands below are analytic so 200 nodes
    # reach machine precision.
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


class _SineProfile:
    """Coordinate profile t(x) = x + a sin(w x) with w = pi (cube) or 2 pi
    (torus lift); carries the closed-form potential pieces."""

    def __init__(self, a, freq):
        self.a = float(a)
        self.freq = float(freq)
        if self.a < 0 or self.a * self.freq >= 1.0:
            raise ValueError("amplitude must satisfy 0 <= a * freq < 1 for injectivity")

    def t(self, x):
        return x + self.a * np.sin(self.freq * x)

    def t_prime(self, x):
        return 1.0 + self.a * self.freq * np.cos(self.freq * x)

    def brenier(self, x):
        # Antiderivative of t, so the gradient of the sum over coordinates
        # is the map itself.
        return 0.5 * x * x - (self.a / self.freq) * np.cos(self.freq * x)

    def phi_k(self, x):
        # x^2 - 2 * brenier(x); the quadratic terms cancel.
        return (2.0 * self.a / self.freq) * np.cos(self.freq * x)

    def t_inv(self, y):
        """Inverse of the (lifted) map by safeguarded Newton; t' >= 1 - a*freq > 0."""
        y = np.asarray(y, dtype=float)
        x = y.copy()
        for _ in range(100):
            step = (self.t(x) - y) / self.t_prime(x)
            x = x - step
            if np.max(np.abs(step)) < 1e-15:
                break
        # Iterates stay within |x - y| <= a by monotonicity; clip for safety.
        return np.clip(x, y - self.a, y + self.a)

    def psi_k(self, y):
        xstar = self.t_inv(y)
        return (y - xstar) ** 2 - self.phi_k(xstar)

    @property
    def lam(self):
        c = self.a * self.freq
        if c == 0.0:
            return 1.0
        return max(1.0 + c, 1.0 / (1.0 - c))


@dataclass(frozen=True)
class GroundTruth:
    """Analytic transport family: source P uniform on the domain, target
    Q = T0 # P for a coordinatewise monotone map T0.

    Every evaluator is vectorized over an (n, d) first argument. Exact
    values (`w2sq`, `var_phi`, `var_psi`) are closed forms or quadrature
    oracles; the torus family's optimality is additionally certified by a
    discrete-transport oracle in the test suite, since translations of
    near-uniform densities are not optimal in general.
    """

    family: str
    d: int
    domain: str
    amplitude: float
    profile: _SineProfile = field(repr=False)
    lam: float
    w2sq: float
    var_phi: float
    var_psi: float
    gamma: float

    # -- map and potential evaluators -------------------------------------

    def t0(self, x):
        """Optimal map, coordinatewise; torus values wrap back to [0,1)."""
        x = np.asarray(x, dtype=float)
        y = self.profile.t(x)
        if self.domain == "torus":
            y = np.mod(y, 1.0)
        return y

    def t0_lift(self, x):
        """Unwrapped map (identity lift on the cube)."""
        return self.profile.t(np.asarray(x, dtype=float))

    def t0_inv(self, y):
        y = np.asarray(y, dtype=float)
        x = self.profile.t_inv(y)
        if self.domain == "torus":
            x = np.mod(x, 1.0)
        return x

    def t_prime_1d(self, x):
        return self.profile.t_prime(np.asarray(x, dtype=float))

    def brenier(self, x):
        """Convex potential of the lifted map, summed over coordinates."""
        x = np.asarray(x, dtype=float)
        return np.sum(self.profile.brenier(x), axis=-1)

    def phi_k(self, x):
        """Source Kantorovich potential |x|^2 - 2 brenier(x) (mean-centered
        only up to the family's closed form; periodic on the torus)."""
        x = np.asarray(x, dtype=float)
        return np.sum(self.profile.phi_k(x), axis=-1)

    def psi_k(self, y):
        """Target Kantorovich potential via the tight conjugate:
        psi(y) = c(x*, y) - phi(x*) at x* = T0^{-1}(y), coordinatewise."""
        y = np.asarray(y, dtype=float)
        return np.sum(self.profile.psi_k(y), axis=-1)

    # -- densities ---------------------------------------------------------

    def p_density(self, x):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1])

    def q_density(self, y):
        """Pushforward density q(y) = 1 / T0'(T0^{-1}(y)), coordinatewise."""
        y = np.asarray(y, dtype=float)
        xstar = self.profile.t_inv(y)
        return np.prod(1.0 / self.profile.t_prime(xstar), axis=-1)

    # -- 1D distribution oracles (quantile machinery for exact tests) ------

    def q_quantile_1d(self, u):
        """Quantile function of the 1D target marginal; equals T0 on the
        uniform source quantile u."""
        return self.profile.t(np.asarray(u, dtype=float))

    def q_cdf_1d(self, y):
        return self.profile.t_inv(np.asarray(y, dtype=float))

    # -- sampling -----------------------------------------------------------

    def sample_source(self, n, rng):
        g = rng.generator()
        return WeightedCloud.uniform(g.random((n, self.d)), self.domain)

    def sample_target(self, n, rng):
        g = rng.generator()
        y = self.t0(g.random((n, self.d)))
        return WeightedCloud.uniform(y, self.domain)


def sample(gt, which, n, rng):
    """Draw an i.i.d. cloud of size n from the family's source or target law.

    Target draws are T0(X) for fresh source draws from the given stream, so
    paired experiments should derive distinct child streams for each side.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if which == "source":
        return gt.sample_source(n, rng)
    if which == "target":
        return gt.sample_target(n, rng)
    raise ValueError(f"which must be 'source' or 'target', got {which!r}")


def grid(d, M, domain="cube", density=None):
    """Regular M^d midpoint grid as a weighted cloud.

    With `density` (a callable on (n, d) arrays), weights are proportional
    to the density at the midpoints and renormalized; otherwise uniform.
    Raises if M^d exceeds the configured memory cap.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    _check_domain(domain)
    if M**d > GRID_CELL_CAP:
        raise ValueError(f"grid of {M}^{d} cells exceeds cap {GRID_CELL_CAP}")
    axis = (np.arange(M) + 0.5) / M
    if d == 1:
        pts = axis[:, None]
    else:
        mesh = np.meshgrid(*([axis] * d), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
    if density is None:
        w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    else:
        w = np.asarray(density(pts), dtype=float)
        if w.shape != (pts.shape[0],):
            raise ValueError("density must return one value per grid point")
        if np.any(w < 0):
            raise ValueError("density values must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("density integrates to zero on the grid")
        w = w / total
    return WeightedCloud(pts, w, domain)


def _variance_of_pushforward(profile, func):
    """Var under the 1D target law of func(y), via source-side quadrature."""
    x, w = _gl_nodes()
    vals = func(profile.t(x))
    mean = float(np.dot(w, vals))
    second = float(np.dot(w, vals * vals))
    return second - mean * mean


def make_ground_truth(spec):
    """Construct a family from its id string.

    Supported ids, with optional ':key=value,...' parameters:

    - "identity"          (params: d)        T0 = id on the cube, P = Q.
    - "sine1d"            (params: a=0.2)    T0(x) = x + a sin(pi x) on [0,1].
    - "product-sine"      (params: d=2, a=0.2)  coordinatewise sine1d map.
    - "torus-sep"         (params: d=1, a=0.1)  T0(x)_c = x_c + a sin(2 pi x_c)
                          mod 1; requires a < 1/(2 pi). Exactness of the
                          closed forms is oracle-certified in the test suite.
    """
    name, _, paramstr = spec.partition(":")
    name = name.strip()
    params = {}
    if paramstr:
        for item in paramstr.split(","):
            key, _, val = item.partition("=")
            key = key.strip()
            if key not in ("d", "a"):
                raise ValueError(f"unknown family parameter {key!r}")
            params[key] = val.strip()
    try:
        d = int(params.get("d", {"identity": 1, "sine1d": 1, "product-sine": 2, "torus-sep": 1}.get(name, 1)))
        a = float(params.get("a", {"sine1d": 0.2, "product-sine": 0.2, "torus-sep": 0.1}.get(name, 0.0)))
    except ValueError as exc:
        raise ValueError(f"bad family parameter in {spec!r}: {exc}") from None
    if d < 1:
        raise ValueError("family dimension must be positive")

    if name == "identity":
        profile = _SineProfile(0.0, math.pi)
        domain = "cube"
    elif name == "sine1d":
        if "d" in params and d != 1:
            raise ValueError("sine1d is one-dimensional; use product-sine for d > 1")
        d = 1
        profile = _SineProfile(a, math.pi)
        domain = "cube"
    elif name == "product-sine":
        profile = _SineProfile(a, math.pi)
        domain = "cube"
    elif name == "torus-sep":
        profile = _SineProfile(a, 2.0 * math.pi)
        domain = "torus"
    else:
        raise ValueError(f"unknown family id {name!r}")

    # Per-coordinate closed forms; coordinates are i.i.d. so exact values
    # scale linearly in d.
    w2sq_1d = 0.5 * a * a
    var_phi_1d = 0.5 * (2.0 * a / profile.freq) ** 2
    var_psi_1d = _variance_of_pushforward(profile, profile.psi_k) if a > 0 else 0.0
    lam = profile.lam
    return GroundTruth(
        family=spec,
        d=d,
        domain=domain,
        amplitude=a,
        profile=profile,
        lam=lam,
        w2sq=d * w2sq_1d,
        var_phi=d * var_phi_1d,
        var_psi=d * var_psi_1d,
        gamma=lam,
    )
