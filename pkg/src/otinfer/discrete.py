"""Exact discrete optimal transport with dual certificates.

Three solve paths produce identical contracts: a monotone matching with
staircase duals for 1D euclidean instances, a self-certifying network
simplex as the general engine, and a column-generation wrapper around HiGHS
dual simplex kept as a slow cross-validation reference. All return an
optimal basic coupling, feasible dual potentials with complementary
slackness, and a numerically zero duality gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from otinfer.domain import WeightedCloud

METRICS = ("euclidean-sq", "torus-sq")

# LP size guards: total atoms (rows) and dense pricing block size.
ROW_CAP = 1 << 20
_PRICE_CHUNK = 1 << 24

# Dual feasibility slack accepted from the LP before arcs are re-priced.
_PRICE_TOL = 1e-11


@dataclass(frozen=True)
class Coupling:
    """Sparse transport plan with marginal certificates.

    `row`, `col`, `vals` list the support entries pi_ij > 0; basic solutions
    carry at most n + m - 1 of them. Marginal sums are validated to 1e-10
    against the source and target weights on construction.
    """

    n: int
    m: int
    row: np.ndarray
    col: np.ndarray
    vals: np.ndarray
    cost: float
    source_weights: np.ndarray
    target_weights: np.ndarray

    def __post_init__(self):
        row = np.asarray(self.row, dtype=np.intp)
        col = np.asarray(self.col, dtype=np.intp)
        vals = np.asarray(self.vals, dtype=float)
        if not (row.shape == col.shape == vals.shape):
            raise ValueError("coupling support arrays must share a shape")
        if np.any(vals < 0):
            raise ValueError("coupling entries must be nonnegative")
        row_sums = np.bincount(row, weights=vals, minlength=self.n)
        col_sums = np.bincount(col, weights=vals, minlength=self.m)
        if np.max(np.abs(row_sums - self.source_weights)) > 1e-10:
            raise ValueError("row sums do not match source weights")
        if np.max(np.abs(col_sums - self.target_weights)) > 1e-10:
            raise ValueError("column sums do not match target weights")
        for arr in (row, col, vals):
            arr.flags.writeable = False
        object.__setattr__(self, "row", row)
        object.__setattr__(self, "col", col)
        object.__setattr__(self, "vals", vals)

    def dense(self):
        """Dense n x m plan, for small-instance tests."""
        plan = np.zeros((self.n, self.m))
        np.add.at(plan, (self.row, self.col), self.vals)
        return plan


@dataclass(frozen=True)
class DualPotentials:
    """Kantorovich potentials at the atoms, normalized to max(phi) = 0."""

    phi: np.ndarray
    psi: np.ndarray
    gap: float

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        phi.flags.writeable = False
        psi.flags.writeable = False
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)


def _check_metric(mu, nu, metric):
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    if mu.domain != nu.domain:
        raise ValueError("clouds live on different domains")
    if mu.d != nu.d:
        raise ValueError("clouds have different dimensions")
    if metric == "torus-sq" and mu.domain != "torus":
        raise ValueError("torus-sq metric requires torus clouds")
    if metric == "euclidean-sq" and mu.domain == "torus":
        raise ValueError("torus clouds must use the torus-sq metric")


def cost_block(X, Y, metric):
    """Pairwise squared costs between row blocks of points."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if metric == "euclidean-sq":
        sq = (
            np.sum(X * X, axis=1)[:, None]
            + np.sum(Y * Y, axis=1)[None, :]
            - 2.0 * (X @ Y.T)
        )
        return np.maximum(sq, 0.0)
    out = np.zeros((X.shape[0], Y.shape[0]))
    for c in range(X.shape[1]):
        delta = np.abs(X[:, c][:, None] - Y[:, c][None, :])
        delta = np.minimum(delta, 1.0 - delta)
        out += delta * delta
    return out


def _pair_cost(Xp, Yp, metric):
    """Squared costs for matched rows of two equal-length point arrays."""
    if metric == "euclidean-sq":
        diff = Xp - Yp
    else:
        diff = np.abs(Xp - Yp)
        diff = np.minimum(diff, 1.0 - diff)
    return np.sum(diff * diff, axis=-1)


# ---------------------------------------------------------------------------
# 1D euclidean fast path: monotone (northwest-corner on sorted atoms) plan
# plus staircase duals. The squared cost on sorted reals is a Monge array,
# which makes the greedy plan optimal and the neighbor-tight duals feasible.
# ---------------------------------------------------------------------------


def _monotone_plan(wx, wy):
    """Northwest-corner traversal of two weight vectors (assumed sorted
    atom order). Returns support triples; degenerate simultaneous
    exhaustion advances both sides, so the support is a forest."""
    n, m = len(wx), len(wy)
    rows = np.empty(n + m, dtype=np.intp)
    cols = np.empty(n + m, dtype=np.intp)
    vals = np.empty(n + m)
    i = j = k = 0
    a, b = wx[0], wy[0]
    while True:
        take = min(a, b)
        rows[k], cols[k], vals[k] = i, j, take
        k += 1
        a -= take
        b -= take
        ex_a = a <= 1e-17
        ex_b = b <= 1e-17
        if ex_a and i + 1 < n:
            i += 1
            a = wx[i]
            if ex_b and j + 1 < m:
                j += 1
                b = wy[j]
        elif ex_b and j + 1 < m:
            j += 1
            b = wy[j]
        else:
            break
    return rows[:k], cols[:k], vals[:k]


def _staircase_duals(xs, ys, rows, cols):
    """Duals tight on the monotone support, bridged at block boundaries.

    Along the support staircase, a shared row fixes the next psi, a shared
    column fixes the next phi, and a diagonal step is pinned by tightening
    the (i, j+1) neighbor; the Monge inequality propagates feasibility to
    all remaining pairs.
    """
    u = np.zeros(len(xs))
    v = np.zeros(len(ys))
    u[rows[0]] = 0.0
    v[cols[0]] = (xs[rows[0]] - ys[cols[0]]) ** 2
    for k in range(1, len(rows)):
        i, j = rows[k], cols[k]
        pi, pj = rows[k - 1], cols[k - 1]
        c = (xs[i] - ys[j]) ** 2
        if i == pi:
            v[j] = c - u[i]
        elif j == pj:
            u[i] = c - v[j]
        else:
            v[j] = (xs[pi] - ys[j]) ** 2 - u[pi]
            u[i] = c - v[j]
    return u, v


def _solve_1d_monotone(mu, nu):
    x = mu.points[:, 0]
    y = nu.points[:, 0]
    # Stable sort keeps equal atoms in input order, for reproducibility.
    ox = np.argsort(x, kind="stable")
    oy = np.argsort(y, kind="stable")
    xs, ys = x[ox], y[oy]
    rows, cols, vals = _monotone_plan(mu.weights[ox], nu.weights[oy])
    cost = float(np.dot(vals, (xs[rows] - ys[cols]) ** 2))
    u, v = _staircase_duals(xs, ys, rows, cols)
    # Scatter back to input order and normalize max(phi) = 0.
    phi = np.empty_like(u)
    psi = np.empty_like(v)
    phi[ox] = u
    psi[oy] = v
    shift = phi.max()
    phi -= shift
    psi += shift
    dual_val = float(np.dot(mu.weights, phi) + np.dot(nu.weights, psi))
    coupling = Coupling(
        n=mu.n,
        m=nu.n,
        row=ox[rows],
        col=oy[cols],
        vals=vals,
        cost=cost,
        source_weights=mu.weights,
        target_weights=nu.weights,
    )
    duals = DualPotentials(phi=phi, psi=psi, gap=abs(cost - dual_val))
    return coupling, duals


# ---------------------------------------------------------------------------
# General path: column generation over candidate arcs with HiGHS dual
# simplex on the restricted LP and exact full-matrix reduced-cost pricing.
# ---------------------------------------------------------------------------


def _chain_arcs(X, Y, wx, wy):
    """Arcs of the northwest-corner plan on first-coordinate order; they
    support a nonnegative feasible flow, so the initial restricted LP is
    always feasible."""
    ox = np.argsort(X[:, 0], kind="stable")
    oy = np.argsort(Y[:, 0], kind="stable")
    rows, cols, _ = _monotone_plan(wx[ox], wy[oy])
    return np.column_stack([ox[rows], oy[cols]])


def _knn_arcs(X, Y, metric, k):
    from scipy.spatial import cKDTree

    boxsize = 1.0 if metric == "torus-sq" else None
    k = min(k, len(Y))
    tree = cKDTree(Y, boxsize=boxsize)
    _, idx = tree.query(X, k=k, workers=1)
    idx = np.atleast_2d(idx)
    if idx.shape[0] != X.shape[0]:
        idx = idx.T
    rows = np.repeat(np.arange(X.shape[0], dtype=np.intp), idx.shape[1])
    return np.column_stack([rows, idx.ravel().astype(np.intp)])


def _restricted_lp(arcs, costs, wx, wy):
    n, m = len(wx), len(wy)
    k = len(arcs)
    data = np.ones(2 * k)
    rows = np.concatenate([arcs[:, 0], n + arcs[:, 1]])
    cols = np.concatenate([np.arange(k), np.arange(k)])
    A = sparse.csc_matrix((data, (rows, cols)), shape=(n + m, k))
    b = np.concatenate([wx, wy])
    res = linprog(
        costs,
        A_eq=A,
        b_eq=b,
        bounds=(0, None),
        method="highs-ds",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if res.status != 0:
        raise RuntimeError(f"restricted transport LP failed: {res.message}")
    duals = res.eqlin.marginals
    return res.x, duals[:n], duals[n:], res.fun


def _price_out(X, Y, metric, u, v, tol):
    """Scan all reduced costs c_ij - u_i - v_j; return violating arcs."""
    n, m = X.shape[0], Y.shape[0]
    block = max(1, _PRICE_CHUNK // max(m, 1))
    found_r = []
    found_c = []
    worst = 0.0
    for start in range(0, n, block):
        stop = min(start + block, n)
        red = cost_block(X[start:stop], Y, metric)
        red -= u[start:stop, None]
        red -= v[None, :]
        viol = red < -tol
        if np.any(viol):
            r, c = np.nonzero(viol)
            # Keep the most violating arcs per block to bound LP growth.
            vals = red[r, c]
            worst = min(worst, float(vals.min()))
            if len(r) > 4 * (n + m):
                keep = np.argpartition(vals, 4 * (n + m))[: 4 * (n + m)]
                r, c = r[keep], c[keep]
            found_r.append(r + start)
            found_c.append(c)
    if not found_r:
        return None, worst
    return np.column_stack([np.concatenate(found_r), np.concatenate(found_c)]), worst


def _solve_colgen(mu, nu, metric, knn_seed=8, max_rounds=60):
    X, Y = mu.points, nu.points
    wx, wy = mu.weights, nu.weights
    n, m = mu.n, nu.n
    arcs = np.vstack([_chain_arcs(X, Y, wx, wy), _knn_arcs(X, Y, metric, knn_seed)])
    arcs = np.unique(arcs, axis=0)
    tol = _PRICE_TOL * (1.0 + mu.d)
    worst = 0.0
    for _ in range(max_rounds):
        costs = _pair_cost(X[arcs[:, 0]], Y[arcs[:, 1]], metric)
        sol, u, v, _ = _restricted_lp(arcs, costs, wx, wy)
        new_arcs, worst = _price_out(X, Y, metric, u, v, tol)
        if new_arcs is None:
            break
        arcs = np.unique(np.vstack([arcs, new_arcs]), axis=0)
    else:
        raise RuntimeError(
            f"column generation failed to converge in {max_rounds} rounds "
            f"(worst reduced cost {worst:.3e})"
        )
    support = sol > 1e-15
    srow = arcs[support, 0]
    scol = arcs[support, 1]
    svals = sol[support]
    cost = float(np.dot(svals, _pair_cost(X[srow], Y[scol], metric)))
    shift = u.max()
    phi = u - shift
    psi = v + shift
    dual_val = float(np.dot(wx, phi) + np.dot(wy, psi))
    coupling = Coupling(
        n=n, m=m, row=srow, col=scol, vals=svals, cost=cost,
        source_weights=wx, target_weights=wy,
    )
    duals = DualPotentials(phi=phi, psi=psi, gap=abs(cost - dual_val))
    return coupling, duals


def _solve_netsimplex(mu, nu, metric):
    from ._netsimplex import network_simplex

    torus = metric == "torus-sq"
    keep_x = mu.weights > 0.0
    keep_y = nu.weights > 0.0
    if keep_x.all() and keep_y.all():
        row, col, vals, phi, psi, cost, _ = network_simplex(
            mu.points, nu.points, mu.weights, nu.weights, torus
        )
    else:
        # zero-mass atoms (empty histogram cells) never carry flow; solve
        # on the positive support and extend the duals by conjugation,
        # which is the tightest feasible completion
        ix = np.nonzero(keep_x)[0]
        iy = np.nonzero(keep_y)[0]
        mu_s = WeightedCloud(mu.points[ix], mu.weights[ix], domain=mu.domain)
        nu_s = WeightedCloud(nu.points[iy], nu.weights[iy], domain=nu.domain)
        row, col, vals, phi_s, psi_s, cost, _ = network_simplex(
            mu_s.points, nu_s.points, mu_s.weights, nu_s.weights, torus
        )
        row = ix[row]
        col = iy[col]
        phi = np.empty(mu.n)
        psi = np.empty(nu.n)
        phi[ix] = phi_s
        psi[iy] = psi_s
        if not keep_y.all():
            psi[~keep_y] = c_transform(phi_s, mu_s, nu.points[~keep_y], metric)
        if not keep_x.all():
            phi[~keep_x] = c_transform(psi_s, nu_s, mu.points[~keep_x], metric)
        shift = phi.max()
        phi = phi - shift
        psi = psi + shift
    dual_val = float(np.dot(mu.weights, phi) + np.dot(nu.weights, psi))
    coupling = Coupling(
        n=mu.n, m=nu.n, row=row, col=col, vals=vals, cost=cost,
        source_weights=mu.weights, target_weights=nu.weights,
    )
    duals = DualPotentials(phi=phi, psi=psi, gap=abs(cost - dual_val))
    return coupling, duals


def solve_discrete_ot(mu, nu, metric="euclidean-sq", method="auto"):
    """Exact optimal transport between two weighted clouds.

    Parameters
    ----------
    mu, nu : WeightedCloud
        Source and target; weights must each sum to 1.
    metric : {"euclidean-sq", "torus-sq"}
        Squared euclidean cost on the cube, squared wrap-around distance on
        the torus. Mixed domain/metric combinations are rejected.
    method : {"auto", "monotone-1d", "network-simplex", "lp"}
        "auto" uses the monotone fast path for 1D euclidean instances and
        the network simplex otherwise; the explicit names force a path.
        "lp" is the column-generation reference engine kept for
        cross-validation tests (exact but much slower).

    Returns
    -------
    (Coupling, DualPotentials)
        Optimal basic plan and feasible duals with max(phi) = 0; the duality
        gap satisfies gap <= 1e-9 * (1 + cost).
    """
    if not isinstance(mu, WeightedCloud) or not isinstance(nu, WeightedCloud):
        raise TypeError("solve_discrete_ot expects WeightedCloud inputs")
    _check_metric(mu, nu, metric)
    if mu.n + nu.n > ROW_CAP:
        raise ValueError(f"instance size {mu.n}+{nu.n} exceeds cap {ROW_CAP}")
    if method == "auto":
        method = (
            "monotone-1d"
            if (mu.d == 1 and metric == "euclidean-sq")
            else "network-simplex"
        )
    if method == "monotone-1d":
        if mu.d != 1 or metric != "euclidean-sq":
            raise ValueError("monotone-1d path requires 1D euclidean instances")
        return _solve_1d_monotone(mu, nu)
    if method == "network-simplex":
        return _solve_netsimplex(mu, nu, metric)
    if method == "lp":
        return _solve_colgen(mu, nu, metric)
    raise ValueError(f"unknown method {method!r}")


def assignment_coupling(mu, nu, metric="euclidean-sq"):
    """Optimal permutation coupling for n = m uniform clouds (no duals).

    A faster exact kernel for rate studies that only need the plan; the
    returned coupling matches `solve_discrete_ot`'s cost on every instance
    (assignment and transportation optima coincide for uniform weights).
    """
    from scipy.optimize import linear_sum_assignment

    _check_metric(mu, nu, metric)
    if mu.n != nu.n:
        raise ValueError("assignment coupling requires n = m")
    if np.max(np.abs(mu.weights - 1.0 / mu.n)) > 1e-12 or np.max(
        np.abs(nu.weights - 1.0 / nu.n)
    ) > 1e-12:
        raise ValueError("assignment coupling requires uniform weights")
    C = cost_block(mu.points, nu.points, metric)
    rows, cols = linear_sum_assignment(C)
    vals = np.full(mu.n, 1.0 / mu.n)
    cost = float(C[rows, cols].mean())
    return Coupling(
        n=mu.n, m=nu.n, row=rows.astype(np.intp), col=cols.astype(np.intp),
        vals=vals, cost=cost, source_weights=mu.weights, target_weights=nu.weights,
    )


def c_transform(phi, A, query, metric="euclidean-sq"):
    """Cost conjugate psi(y) = min_i { c(x_i, y) - phi_i } at query points."""
    phi = np.asarray(phi, dtype=float)
    if not isinstance(A, WeightedCloud):
        raise TypeError("A must be a WeightedCloud")
    if A.n == 0:
        raise ValueError("cannot c-transform against an empty cloud")
    if phi.shape != (A.n,):
        raise ValueError("phi must assign one value per point of A")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if isinstance(query, WeightedCloud):
        Q = query.points
    else:
        Q = np.asarray(query, dtype=float)
        if Q.ndim == 1:
            Q = Q[:, None]
    out = np.empty(Q.shape[0])
    block = max(1, _PRICE_CHUNK // max(A.n, 1))
    for start in range(0, Q.shape[0], block):
        stop = min(start + block, Q.shape[0])
        C = cost_block(Q[start:stop], A.points, metric)
        out[start:stop] = np.min(C - phi[None, :], axis=1)
    return out


def displacement_cost(coupling, X, Y, t0):
    """Coupling-weighted squared displacement sum pi_ij ||T0(X_i) - Y_j||^2.

    `t0` is any map evaluator defined on X's domain; the torus metric is
    used when the clouds are torus-tagged. Equals the in-sample squared
    map error when n = m and the plan is a permutation.
    """
    tx = np.asarray(t0(X.points), dtype=float)
    metric = "torus-sq" if X.domain == "torus" else "euclidean-sq"
    sq = _pair_cost(tx[coupling.row], Y.points[coupling.col], metric)
    return float(np.dot(coupling.vals, sq))
