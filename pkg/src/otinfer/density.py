"""Histogram and kernel density plugins on the unit cube and flat torus.

Estimates are stored as midpoint values on a regular M^d grid, so transport
consumers can treat them directly as weighted clouds.  The histogram path
projects onto dyadic cells (piecewise-constant wavelets at a single level);
the kernel path convolves with a compactly supported smooth kernel of
selectable order, periodized on the torus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from otinfer.domain import GRID_CELL_CAP, WeightedCloud, _check_domain, grid

__all__ = [
    "DensityEstimate",
    "Kernel",
    "build_order_kernel",
    "dyadic_project",
    "haar_estimate",
    "kernel_estimate",
    "tune_resolution",
    "exact_density",
]

# Uniform trapezoid rule on [-1, 1] for kernel mass and moment quadrature.
# The integrands vanish to all orders at the endpoints, so the trapezoid
# rule is spectrally accurate here (all Euler-Maclaurin corrections vanish).
_QUAD_X = np.linspace(-1.0, 1.0, (1 << 12) + 1)
_QUAD_W = np.full(_QUAD_X.shape, 2.0 / (_QUAD_X.size - 1))
_QUAD_W[0] *= 0.5
_QUAD_W[-1] *= 0.5

# Frequency reach of the Fourier certification grid.
_CERT_FREQ_MAX = 64.0
_CERT_SAMPLES = 1 << 14


def _bump(u):
    """exp(-1/(1-u^2)) on (-1, 1), zero outside; not normalized."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ui * ui))
    return out


_BUMP_MASS = float(np.dot(_QUAD_W, _bump(_QUAD_X)))


@dataclass(frozen=True)
class Kernel:
    """Univariate even kernel, smooth and supported on [-1, 1].

    A linear combination of rescaled smooth bumps whose coefficients kill
    the low-order moments; products across axes extend it to d > 1.  The
    (zeta, kappa) pair certifies the Fourier growth bound
    |F[K](x) - 1| <= kappa * |x|^zeta on the certification grid.
    """

    zeta: int
    scales: np.ndarray
    coeffs: np.ndarray
    kappa: float
    cert_freq: float
    product: bool = True

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=float)
        coeffs = np.asarray(self.coeffs, dtype=float)
        scales.flags.writeable = False
        coeffs.flags.writeable = False
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def name(self):
        return f"order-{self.zeta}"

    @property
    def certification(self):
        """Certification report: {zeta, kappa, max_violation_freq}."""
        return {
            "zeta": self.zeta,
            "kappa": self.kappa,
            "max_violation_freq": self.cert_freq,
        }

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for lam, a in zip(self.scales, self.coeffs):
            out += (a / (lam * _BUMP_MASS)) * _bump(x / lam)
        return out


def _certify_fourier(kernel_vals, zeta):
    """Max of |F[K](xi) - 1| / xi^zeta over the discrete frequency grid.

    The kernel is sampled on [-1, 1), so the DFT lands on half-integer
    frequencies; the bound is scanned up to the configured reach.
    """
    L = kernel_vals.shape[0]
    fhat = np.fft.rfft(kernel_vals) * (2.0 / L)
    kmax = int(_CERT_FREQ_MAX * 2)
    k = np.arange(1, kmax + 1)
    # samples start at x = -1, shifting each frequency's phase by pi*k
    vals = np.real(fhat[1 : kmax + 1]) * np.where(k % 2 == 0, 1.0, -1.0)
    xi = k / 2.0
    ratio = np.abs(vals - 1.0) / xi**zeta
    t = int(np.argmax(ratio))
    return float(ratio[t]), float(xi[t])


def build_order_kernel(zeta):
    """Construct an even smooth kernel with vanishing moments below `zeta`.

    Combines bumps at scales 1/s for s = 1..zeta/2; the coefficients solve
    a Vandermonde system in the squared scales, so all even moments below
    `zeta` cancel while the mass stays 1 (odd moments vanish by symmetry).
    The Fourier certification runs at build time and the resulting kappa is
    stored on the kernel.

    Parameters
    ----------
    zeta : {2, 4, 6, 8}
        Target order.

    Returns
    -------
    Kernel

    Raises
    ------
    ValueError
        If the order is unsupported, or mass/moment quadrature or the
        Fourier certification fails (the error names the frequency).
    """
    if zeta not in (2, 4, 6, 8):
        raise ValueError(f"kernel order must be one of 2, 4, 6, 8, got {zeta!r}")
    q = zeta // 2
    scales = 1.0 / np.arange(1.0, q + 1.0)
    # rows r = 0..q-1: sum_s coeffs[s] * (scales[s]^2)^r = [r == 0]
    V = np.vander(scales**2, q, increasing=True).T
    rhs = np.zeros(q)
    rhs[0] = 1.0
    coeffs = np.linalg.solve(V, rhs)

    kernel = Kernel(zeta=zeta, scales=scales, coeffs=coeffs,
                    kappa=np.nan, cert_freq=np.nan)
    vals = kernel(_QUAD_X)
    mass = float(np.dot(_QUAD_W, vals))
    if abs(mass - 1.0) > 1e-8:
        raise ValueError(f"kernel mass quadrature off: {mass!r}")
    for r in range(1, zeta):
        mom = float(np.dot(_QUAD_W, vals * _QUAD_X**r))
        if abs(mom) > 1e-6:
            raise ValueError(f"moment {r} fails to vanish: {mom:.3e}")

    x = -1.0 + 2.0 * np.arange(_CERT_SAMPLES) / _CERT_SAMPLES
    kappa, freq = _certify_fourier(kernel(x), zeta)
    if not np.isfinite(kappa):
        raise ValueError(f"Fourier certification failed at frequency {freq}")
    return Kernel(zeta=zeta, scales=scales, coeffs=coeffs,
                  kappa=kappa, cert_freq=freq)


@dataclass(frozen=True)
class DensityEstimate:
    """Nonnegative density values at the midpoints of a regular M^d grid.

    Parameters
    ----------
    M : int
        Grid resolution per axis.
    d : int
        Dimension.
    values : (M**d,) array
        Midpoint density values in the C order of `domain.grid`.
    domain : {"cube", "torus"}
    provenance : tuple
        ("haar", J), ("kernel", h, kernel_name) or ("exact", family_id).
    n_sample : int, optional
        Size of the sample the estimate was fitted on; None for exact
        discretizations.  Downstream inference uses it as the effective
        sample size.
    """

    M: int
    d: int
    values: np.ndarray
    domain: str
    provenance: tuple
    n_sample: int | None = None

    def __post_init__(self):
        _check_domain(self.domain)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.M**self.d,):
            raise ValueError("values must hold one entry per grid cell")
        if np.any(vals < 0.0):
            raise ValueError("density values must be nonnegative")
        total = vals.sum() * self.cell_volume
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"density must integrate to 1, got {total!r}")
        if self.provenance and self.provenance[0] == "haar":
            J = self.provenance[1]
            if self.M % (1 << J) != 0:
                raise ValueError("grid resolution must be a multiple of 2^J")
            if not self._dyadic_constant(vals, J):
                raise ValueError("values are not constant on level-J cells")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def _dyadic_constant(self, vals, J):
        rep = self.M // (1 << J)
        shape = []
        for _ in range(self.d):
            shape.extend((1 << J, rep))
        blocks = vals.reshape(shape)
        sub_axes = tuple(range(1, 2 * self.d, 2))
        return bool(np.all(blocks == blocks.min(axis=sub_axes, keepdims=True)))

    @property
    def cell_volume(self):
        return float(self.M) ** (-self.d)

    def to_cloud(self):
        """Grid midpoints weighted by cell mass, as a WeightedCloud."""
        g = grid(self.d, self.M, self.domain)
        w = self.values * self.cell_volume
        return WeightedCloud(g.points, w / w.sum(), self.domain)


def _check_haar_args(sample, J, M):
    if J < 1 or int(J) != J:
        raise ValueError(f"level must be a positive integer, got {J!r}")
    d = sample.d
    if (1 << (J * d)) > GRID_CELL_CAP:
        raise ValueError(f"2^(J d) = 2^{J * d} exceeds cap {GRID_CELL_CAP}")
    if M % (1 << J) != 0:
        raise ValueError(f"M = {M} is not a multiple of 2^{J}")
    if M**d > GRID_CELL_CAP:
        raise ValueError(f"grid of {M}^{d} cells exceeds cap {GRID_CELL_CAP}")


def haar_estimate(sample, J, M):
    """Dyadic histogram at level J, returned on an M^d midpoint grid.

    Cell values are empirical frequencies over cell volume, so the estimate
    is the single-level piecewise-constant wavelet projection; it is
    nonnegative by construction and never needs clamping.

    Parameters
    ----------
    sample : WeightedCloud
    J : int
        Dyadic level; cells have side 2^-J.
    M : int
        Output grid resolution, a multiple of 2^J.

    Returns
    -------
    DensityEstimate
    """
    _check_haar_args(sample, J, M)
    d = sample.d
    two_j = 1 << J
    idx = np.minimum((sample.points * two_j).astype(np.int64), two_j - 1)
    flat = np.zeros(two_j**d, dtype=float)
    key = np.zeros(sample.n, dtype=np.int64)
    for a in range(d):
        key = key * two_j + idx[:, a]
    np.add.at(flat, key, sample.weights)
    cellvals = flat * float(two_j) ** d

    rep = M // two_j
    arr = cellvals.reshape((two_j,) * d)
    for a in range(d):
        arr = np.repeat(arr, rep, axis=a)
    return DensityEstimate(M=M, d=d, values=arr.ravel(),
                           domain=sample.domain, provenance=("haar", int(J)),
                           n_sample=sample.n)


def dyadic_project(sample, J, M=None):
    """Project the empirical measure onto level-J dyadic cells.

    The computation is that of `haar_estimate`; it is exposed under this
    name so the projection distance bound (at most sqrt(d) 2^-J, plus grid
    slack) can be tested as a named property.  M defaults to the natural
    resolution 2^J.
    """
    if M is None:
        M = 1 << J
    return haar_estimate(sample, J, M)


def kernel_estimate(sample, h, K, M):
    """Kernel density estimate on the torus, on an M^d midpoint grid.

    The product kernel is periodized by summing shifts in {-1, 0, 1} per
    axis, which is exact for support radius h <= 1.  Negative values from
    higher-order kernels are clamped to zero and the result renormalized by
    the grid quadrature.

    Parameters
    ----------
    sample : WeightedCloud
        Torus sample.
    h : float
        Bandwidth in (0, 1].
    K : Kernel
    M : int
        Output grid resolution.

    Returns
    -------
    DensityEstimate
    """
    if sample.domain != "torus":
        raise ValueError("kernel estimate is defined on the torus")
    if not 0.0 < h <= 1.0:
        raise ValueError(f"bandwidth must lie in (0, 1], got {h!r}")
    d = sample.d
    if M**d > GRID_CELL_CAP:
        raise ValueError(f"grid of {M}^{d} cells exceeds cap {GRID_CELL_CAP}")

    axis = (np.arange(M) + 0.5) / M
    # per-axis periodized kernel matrices, shape (M, n)
    mats = []
    for a in range(d):
        diff = axis[:, None] - sample.points[None, :, a]
        acc = np.zeros_like(diff)
        for shift in (-1.0, 0.0, 1.0):
            acc += K((diff + shift) / h)
        mats.append(acc / h)

    out = np.zeros((M,) * d, dtype=float)
    # accumulate sum_i w_i prod_a mats[a][:, i] in sample chunks to keep the
    # intermediate (M^(d-1), chunk) tensors small
    chunk = max(1, int((1 << 24) // max(1, M ** max(d - 1, 1))))
    letters = "abcdef"[:d]
    sub = ",".join(f"{c}i" for c in letters) + ",i->" + letters
    for lo in range(0, sample.n, chunk):
        hi = min(lo + chunk, sample.n)
        ops = [m[:, lo:hi] for m in mats]
        out += np.einsum(sub, *ops, sample.weights[lo:hi], optimize=True)

    vals = np.maximum(out.ravel(), 0.0)
    total = vals.sum() * float(M) ** (-d)
    if total <= 0.0:
        raise ValueError("estimate clamped to zero everywhere")
    vals = vals / total
    return DensityEstimate(M=M, d=d, values=vals, domain="torus",
                           provenance=("kernel", float(h), K.name),
                           n_sample=sample.n)


def tune_resolution(n, alpha, d, kind="wavelet", M=None):
    """Resolution rule n^(1/(d + 2(alpha-1))), as a level or a bandwidth.

    Parameters
    ----------
    n : int
        Sample size, at least 2.
    alpha : float
        Smoothness index, greater than 1.
    d : int
        Dimension.
    kind : {"wavelet", "kernel"}
        Select the dyadic level J (rounded, clamped to the grid cap) or the
        bandwidth h (clamped to [2/M, 0.5]; the lower clamp applies when M
        is given).
    M : int, optional
        Grid resolution used for the bandwidth floor.

    Returns
    -------
    int or float
        J for "wavelet", h for "kernel".
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if alpha <= 1.0:
        raise ValueError("smoothness must exceed 1")
    expo = d + 2.0 * (alpha - 1.0)
    if kind == "wavelet":
        J = int(round(np.log2(n) / expo))
        J_max = int(np.log2(GRID_CELL_CAP) // d)
        return max(1, min(J, J_max))
    if kind == "kernel":
        h = float(n) ** (-1.0 / expo)
        h = min(h, 0.5)
        if M is not None:
            h = max(h, 2.0 / M)
        return h
    raise ValueError(f"kind must be 'wavelet' or 'kernel', got {kind!r}")


def exact_density(gt, which, M):
    """Grid discretization of a family's source or target density.

    Used where a known density enters a transport solve, so its provenance
    is distinguishable from estimated ones.
    """
    if which == "source":
        f = gt.p_density
    elif which == "target":
        f = gt.q_density
    else:
        raise ValueError(f"which must be 'source' or 'target', got {which!r}")
    g = grid(gt.d, M, gt.domain)
    vals = np.asarray(f(g.points), dtype=float)
    total = vals.sum() * float(M) ** (-gt.d)
    return DensityEstimate(M=M, d=gt.d, values=vals / total, domain=gt.domain,
                           provenance=("exact", f"{gt.family}:{which}"))
