"""Network simplex for dense transportation problems.

JIT-compiled primal network simplex on the complete bipartite graph between
two weighted point clouds.  Arc costs are evaluated on the fly from the point
coordinates, so memory stays O(n + m + candidates) even when n * m runs into
the hundreds of millions.

The initial basis is a northwest-corner staircase over space-filling-curve
orders of the two clouds: nearby curve ranks are nearby points, so the
start is near optimal and pivots only make local repairs (in 1D the curve
order is the exact coordinate sort and the start is already the monotone
optimum).  Grid-shaped sources additionally get a multiscale warm start: the
instance is solved on a coarsened grid first and the coarse basis flows are
split among each cell's children, which cuts pivot counts by an order of
magnitude.  Either warm start spans all real nodes, so a single zero-flow
cost-free artificial arc hangs it under an artificial root node.  Entering
arcs join two real nodes and the root therefore never lies on a pivot
cycle, so that one artificial arc never leaves the basis and no mass ever
rides it; no big-cost machinery is needed.

Pricing is two-level with a hot list.  Pivots run over a candidate arc list
seeded with nearest-neighbor arcs (squared-distance costs make the optimal
support geometrically local); block scans refill a small hot list of
recently violated arcs, and minor iterations pivot from the hot list while
it lasts.  Once the candidate list prices out, the potentials are rebuilt
exactly from the tree and a full pass over all n * m arcs either certifies
optimality or appends each row's worst violated arcs to the list, and
pivoting resumes.  The returned solution therefore certifies itself: the
final full pass bounds the most negative reduced cost, and the flows are
re-derived exactly from the node weights on the final tree.

The tree is stored as parent pointers plus doubly linked child lists.
Subtree sizes stand in for depths: the cycle apex is found by climbing the
smaller subtree, and after a pivot the potential shift is applied to
whichever side of the cut is smaller.

Degenerate pivots are handled with Cunningham's strongly feasible tree rule
(the leaving arc is the last blocking arc in cycle orientation from the
apex); the staircase start satisfies it because its only zero-flow arcs
point toward the root.  A Bland least-index failsafe covers pathological
inputs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["network_simplex"]

# Pivots per node before the stall guard trips.  Grid instances with the
# multiscale warm start pivot a handful of times per node, but uniform
# equal-weight matchings are heavily degenerate and have been observed to
# need a couple hundred pivots per node, so the guard stays far above that.
_PIVOT_FACTOR = 800
_PIVOT_FLOOR = 50_000

# Consecutive zero-step pivots tolerated before switching to Bland's rule.
# Long degenerate streaks are normal on uniform-weight instances; the
# strongly feasible tie-break resolves them, so this failsafe is sized to
# stay out of the way.
_STALL_LIMIT = 20_000

# Full pricing sweeps before giving up; each sweep either certifies
# optimality or feeds violated arcs back into the candidate list, and a
# handful suffices in practice.
_MAX_SWEEPS = 60

# Neighbors per point when seeding the candidate list.
_KNN = 24

# Worst violated arcs appended per source row on each full pricing sweep.
_ROW_APPENDS = 4

# Instances with at most this many arcs skip the kNN seeding and price the
# full arc set as the candidate list.
_SMALL_ARCS = 1 << 17

# Violated arcs carried from a block scan into minor iterations; pivots
# re-price this short list before paying for another block scan.
_HOT = 64


@njit(inline="always", cache=True)
def _arc_cost(X, Y, i, j, torus):
    d = X.shape[1]
    acc = 0.0
    if torus:
        for k in range(d):
            diff = X[i, k] - Y[j, k]
            if diff < 0.0:
                diff = -diff
            if diff > 0.5:
                diff = 1.0 - diff
            acc += diff * diff
    else:
        for k in range(d):
            diff = X[i, k] - Y[j, k]
            acc += diff * diff
    return acc


@njit(inline="always", cache=True)
def _detach(v, parent, first_child, next_sib, prev_sib):
    p = parent[v]
    pr = prev_sib[v]
    nx = next_sib[v]
    if pr == -1:
        first_child[p] = nx
    else:
        next_sib[pr] = nx
    if nx != -1:
        prev_sib[nx] = pr


@njit(inline="always", cache=True)
def _attach(v, p, parent, first_child, next_sib, prev_sib):
    parent[v] = p
    c0 = first_child[p]
    next_sib[v] = c0
    if c0 != -1:
        prev_sib[c0] = v
    first_child[p] = v
    prev_sib[v] = -1


@njit(cache=True, nogil=True)
def _nw_corner(xo, yo, wx, wy):
    """Northwest-corner staircase over the given row and column orders.

    Emits exactly n + m - 1 links (original indices plus flow), each one
    after the first introducing a single new node, so the links form a
    spanning tree grown leaf by leaf.  On an exact cumulative-weight tie
    the source pointer advances first, which makes the zero-flow link that
    follows a source-side child arc and keeps the basis strongly feasible.
    """
    n = xo.shape[0]
    m = yo.shape[0]
    ai = np.empty(n + m - 1, np.int64)
    aj = np.empty(n + m - 1, np.int64)
    af = np.empty(n + m - 1, np.float64)
    i = 0
    j = 0
    a = wx[xo[0]]
    b = wy[yo[0]]
    t = 0
    while True:
        f = a if a < b else b
        ai[t] = xo[i]
        aj[t] = yo[j]
        af[t] = f
        t += 1
        a -= f
        b -= f
        if i == n - 1 and j == m - 1:
            break
        # exhausted sides absorb any rounding residue of the other side's
        # cumulative sums, so the pointers never run past the last atom
        if i == n - 1:
            j += 1
            b = wy[yo[j]]
        elif j == m - 1 or a == 0.0:
            i += 1
            a = wx[xo[i]]
        else:
            j += 1
            b = wy[yo[j]]
    return ai, aj, af


@njit(cache=True, nogil=True)
def _simplex_core(X, Y, wx, wy, torus, ai, aj, af, cand_i, cand_j, cand_c,
                  ncand0, block_size, enter_tol, final_tol, max_pivots):
    """Pivot to certified optimality; returns tree state plus a status code.

    (ai, aj, af) is a feasible spanning warm start: n + m - 1 links
    (source, target, flow) ordered so each link after the first touches
    exactly one node not seen before, and ai[0] is a source.  The candidate
    buffers hold `ncand0` seeded arcs (row, col, cost) with spare capacity
    for sweep appends.  status 0 means the final full pricing pass
    certified optimality, 1 means a guard tripped.  Node v < n is source v,
    node n <= v < n + m is target v - n, and node n + m is the artificial
    root (never a child, so a child's side still tells the direction of its
    parent arc).  Entering arcs join two real nodes, which all live in the
    first source's subtree, so no cycle ever reaches the root and the lone
    artificial arc stays basic at zero flow for the whole run.
    """
    n = X.shape[0]
    m = Y.shape[0]
    N = n + m
    root = N

    parent = np.full(N + 1, -1, np.int64)
    flow = np.zeros(N + 1, np.float64)      # flow on the edge (v, parent[v])
    pi = np.zeros(N + 1, np.float64)
    succ = np.ones(N + 1, np.int64)         # subtree size, node included
    first_child = np.full(N + 1, -1, np.int64)
    next_sib = np.full(N + 1, -1, np.int64)
    prev_sib = np.full(N + 1, -1, np.int64)
    stack = np.empty(N + 1, np.int64)

    # --- warm-start basis: the links span all real nodes, so a single
    # zero-flow artificial arc hangs the first source under the root
    # (pointing toward the root, hence strongly feasible)
    _attach(ai[0], root, parent, first_child, next_sib, prev_sib)
    for t in range(N - 1):
        i = ai[t]
        jn = n + aj[t]
        if parent[jn] == -1:
            _attach(jn, i, parent, first_child, next_sib, prev_sib)
            flow[jn] = af[t]
            pi[jn] = pi[i] - _arc_cost(X, Y, i, aj[t], torus)
        else:
            _attach(i, jn, parent, first_child, next_sib, prev_sib)
            flow[i] = af[t]
            pi[i] = pi[jn] + _arc_cost(X, Y, i, aj[t], torus)

    # subtree sizes by reverse-preorder accumulation
    order = np.empty(N + 1, np.int64)
    stack[0] = root
    sp = 1
    k = 0
    while sp > 0:
        sp -= 1
        x = stack[sp]
        order[k] = x
        k += 1
        c = first_child[x]
        while c != -1:
            stack[sp] = c
            sp += 1
            c = next_sib[c]
    for t in range(k - 1, 0, -1):
        succ[parent[order[t]]] += succ[order[t]]

    ncand = ncand0
    cap = cand_i.shape[0]
    pos = 0
    pivots = 0
    sweeps = 0
    status = 0
    stall = 0
    bland = False
    min_r = 0.0
    hot = np.empty(_HOT, np.int64)
    nhot = 0

    while True:
        # --- pivot until the candidate list prices out
        while True:
            best_r = -enter_tol
            best_k = -1
            if bland:
                # first violating candidate in fixed list order; cannot cycle
                for t in range(ncand):
                    i = cand_i[t]
                    jn = n + cand_j[t]
                    r = cand_c[t] - pi[i] + pi[jn]
                    if r < best_r:
                        best_r = r
                        best_k = t
                        break
            else:
                # minor iteration: re-price the hot list and keep survivors
                w = 0
                for t in range(nhot):
                    k = hot[t]
                    r = cand_c[k] - pi[cand_i[k]] + pi[n + cand_j[k]]
                    if r < -enter_tol:
                        hot[w] = k
                        w += 1
                        if r < best_r:
                            best_r = r
                            best_k = k
                nhot = w
                if best_k < 0:
                    # major iteration: block scans refill the hot list
                    scanned = 0
                    while scanned < ncand:
                        hi = ncand - scanned
                        if hi > block_size:
                            hi = block_size
                        for t in range(hi):
                            k = pos + t
                            if k >= ncand:
                                k -= ncand
                            i = cand_i[k]
                            jn = n + cand_j[k]
                            r = cand_c[k] - pi[i] + pi[jn]
                            if r < -enter_tol:
                                if r < best_r:
                                    best_r = r
                                    best_k = k
                                if nhot < _HOT:
                                    hot[nhot] = k
                                    nhot += 1
                        pos += hi
                        if pos >= ncand:
                            pos -= ncand
                        scanned += hi
                        if best_k >= 0:
                            break
            if best_k < 0:
                break

            if pivots >= max_pivots:
                status = 1
                break
            pivots += 1

            ei = np.int64(cand_i[best_k])
            ejn = n + np.int64(cand_j[best_k])
            re = cand_c[best_k] - pi[ei] + pi[ejn]

            # cycle apex: climb whichever side has the smaller subtree
            u = ei
            v = ejn
            while u != v:
                if succ[u] < succ[v]:
                    u = parent[u]
                else:
                    v = parent[v]
            join = u

            # leaving arc: min flow among edges the cycle traverses
            # backwards; walking up from ei those are source-side edges,
            # up from ejn target-side edges.
            theta = np.inf
            v = ei
            while v != join:
                if v < n and flow[v] < theta:
                    theta = flow[v]
                v = parent[v]
            v = ejn
            while v != join:
                if v >= n and flow[v] < theta:
                    theta = flow[v]
                v = parent[v]

            # Tie-break among blocking arcs.  The normal rule takes the last
            # blocking arc in cycle orientation starting from the apex,
            # which keeps the tree strongly feasible, so degenerate pivots
            # cannot cycle.  The Bland failsafe uses the first blocking arc
            # in a fixed order instead, matching its entering scan
            # (artificial arcs are ordered after all real arcs).
            leave = -1
            leave_on_ei_side = True
            if bland:
                best_idx = np.int64(n) * np.int64(m) + np.int64(N)
                v = ei
                while v != join:
                    if v < n and flow[v] == theta:
                        if parent[v] == root:
                            idx = np.int64(n) * np.int64(m) + v
                        else:
                            idx = v * m + (parent[v] - n)
                        if idx < best_idx:
                            best_idx = idx
                            leave = v
                            leave_on_ei_side = True
                    v = parent[v]
                v = ejn
                while v != join:
                    if v >= n and flow[v] == theta:
                        if parent[v] == root:
                            idx = np.int64(n) * np.int64(m) + v
                        else:
                            idx = parent[v] * m + (v - n)
                        if idx < best_idx:
                            best_idx = idx
                            leave = v
                            leave_on_ei_side = False
                    v = parent[v]
            else:
                # the ejn->join walk follows cycle orientation, so its last
                # tie wins outright; the ei->join walk runs against it, so
                # its first tie is the traversal's last
                v = ejn
                while v != join:
                    if v >= n and flow[v] == theta:
                        leave = v
                        leave_on_ei_side = False
                    v = parent[v]
                if leave == -1:
                    v = ei
                    while v != join:
                        if v < n and flow[v] == theta:
                            leave = v
                            leave_on_ei_side = True
                            break
                        v = parent[v]

            # push theta around the cycle
            if theta > 0.0:
                v = ei
                while v != join:
                    if v < n:
                        flow[v] -= theta
                    else:
                        flow[v] += theta
                    v = parent[v]
                v = ejn
                while v != join:
                    if v < n:
                        flow[v] += theta
                    else:
                        flow[v] -= theta
                    v = parent[v]
                stall = 0
                bland = False
            else:
                stall += 1
                if stall >= _STALL_LIMIT:
                    bland = True
            flow[leave] = 0.0

            # the subtree under the leaving edge moves; its size drives both
            # the ancestor count updates and the potential shift side
            if leave_on_ei_side:
                a_node = ei
                b_node = ejn
            else:
                a_node = ejn
                b_node = ei
            s2 = succ[leave]

            v = parent[leave]
            while v != -1:
                succ[v] -= s2
                v = parent[v]
            v = b_node
            while v != -1:
                succ[v] += s2
                v = parent[v]

            # re-root the cut-off subtree at the entering arc's endpoint
            # inside it, then hang it under the other endpoint
            v = a_node
            pv = parent[v]
            fv = flow[v]
            sv = succ[v]
            _detach(a_node, parent, first_child, next_sib, prev_sib)
            _attach(a_node, b_node, parent, first_child, next_sib, prev_sib)
            flow[a_node] = theta
            succ[a_node] = s2
            while v != leave:
                nxt = parent[pv]
                fnxt = flow[pv]
                snxt = succ[pv]
                _detach(pv, parent, first_child, next_sib, prev_sib)
                _attach(pv, v, parent, first_child, next_sib, prev_sib)
                flow[pv] = fv
                succ[pv] = s2 - sv
                v = pv
                pv = nxt
                fv = fnxt
                sv = snxt

            # shift potentials on the smaller side of the cut; only the
            # difference matters, so either side works
            dpi = re if a_node < n else -re
            if 2 * s2 <= N + 1:
                stack[0] = a_node
                sp = 1
                while sp > 0:
                    sp -= 1
                    x = stack[sp]
                    pi[x] += dpi
                    c = first_child[x]
                    while c != -1:
                        stack[sp] = c
                        sp += 1
                        c = next_sib[c]
            else:
                stack[0] = root
                sp = 1
                while sp > 0:
                    sp -= 1
                    x = stack[sp]
                    pi[x] -= dpi
                    c = first_child[x]
                    while c != -1:
                        if c != a_node:
                            stack[sp] = c
                            sp += 1
                        c = next_sib[c]

        if status == 1:
            break

        # --- rebuild potentials exactly from the tree (kills pivot drift);
        # the root's lone child sits on the cost-free artificial arc
        pi[root] = 0.0
        stack[0] = root
        sp = 1
        while sp > 0:
            sp -= 1
            x = stack[sp]
            if x != root:
                p = parent[x]
                if p == root:
                    pi[x] = 0.0
                elif x < n:
                    pi[x] = _arc_cost(X, Y, x, p - n, torus) + pi[p]
                else:
                    pi[x] = pi[p] - _arc_cost(X, Y, p, x - n, torus)
            c = first_child[x]
            while c != -1:
                stack[sp] = c
                sp += 1
                c = next_sib[c]

        # --- make room for this sweep's appends: drop candidates that
        # price at or above the tolerance (any of them can re-enter via a
        # later sweep, so this only recycles buffer space)
        if cap - ncand < n * _ROW_APPENDS:
            w = 0
            for t in range(ncand):
                i = cand_i[t]
                jn = n + cand_j[t]
                r = cand_c[t] - pi[i] + pi[jn]
                if r < final_tol:
                    cand_i[w] = cand_i[t]
                    cand_j[w] = cand_j[t]
                    cand_c[w] = cand_c[t]
                    w += 1
            ncand = w
            pos = 0
            nhot = 0    # hot entries are list indices; compaction moved them

        # --- exact full pricing sweep: certify, or append violations.
        # Each row contributes at most its few worst violated arcs, so no
        # region of the instance starves while another oscillates; later
        # sweeps mop up whatever was left out.
        sweeps += 1
        min_r = np.inf
        appended = 0
        old_ncand = ncand
        rbuf_r = np.empty(_ROW_APPENDS, np.float64)
        rbuf_c = np.empty(_ROW_APPENDS, np.float64)
        rbuf_j = np.empty(_ROW_APPENDS, np.int64)
        for ii in range(n):
            pii = pi[ii]
            cnt = 0
            for jj in range(m):
                c = _arc_cost(X, Y, ii, jj, torus)
                r = c - pii + pi[n + jj]
                if r < min_r:
                    min_r = r
                if r < -final_tol:
                    if cnt < _ROW_APPENDS:
                        t = cnt
                        cnt += 1
                    elif r < rbuf_r[_ROW_APPENDS - 1]:
                        t = _ROW_APPENDS - 1
                    else:
                        continue
                    while t > 0 and r < rbuf_r[t - 1]:
                        rbuf_r[t] = rbuf_r[t - 1]
                        rbuf_c[t] = rbuf_c[t - 1]
                        rbuf_j[t] = rbuf_j[t - 1]
                        t -= 1
                    rbuf_r[t] = r
                    rbuf_c[t] = c
                    rbuf_j[t] = jj
            for t in range(cnt):
                if ncand < cap:
                    cand_i[ncand] = ii
                    cand_j[ncand] = rbuf_j[t]
                    cand_c[ncand] = rbuf_c[t]
                    ncand += 1
                    appended += 1
        if min_r >= -final_tol:
            break
        if appended == 0 or sweeps >= _MAX_SWEEPS:
            status = 1
            break
        pos = old_ncand
        bs = np.int64(np.sqrt(np.float64(ncand)))
        if bs > block_size:
            block_size = bs

    return (status, pivots, sweeps, min_r,
            parent, pi, first_child, next_sib)


@njit(cache=True, nogil=True)
def _reflow(parent, first_child, next_sib, wx, wy):
    """Exact basic flows for the given weights on the final tree.

    Children of the root carry artificial arcs; at a certified optimum
    their subtrees are internally balanced, so those flows vanish up to
    the rounding of the weight sums.
    """
    n = wx.shape[0]
    m = wy.shape[0]
    N = n + m
    root = N
    order = np.empty(N + 1, np.int64)
    stack = np.empty(N + 1, np.int64)
    stack[0] = root
    sp = 1
    k = 0
    while sp > 0:
        sp -= 1
        x = stack[sp]
        order[k] = x
        k += 1
        c = first_child[x]
        while c != -1:
            stack[sp] = c
            sp += 1
            c = next_sib[c]
    # subtree net supplies, children before parents
    sub = np.empty(N + 1, np.float64)
    for v in range(N):
        sub[v] = wx[v] if v < n else -wy[v - n]
    sub[root] = 0.0
    flow = np.empty(N + 1, np.float64)
    flow[root] = 0.0
    for t in range(N, 0, -1):
        v = order[t]
        sub[parent[v]] += sub[v]
        flow[v] = sub[v] if v < n else -sub[v]
    return flow


@njit(cache=True, nogil=True)
def _tree_cost(X, Y, parent, flow, torus):
    n = X.shape[0]
    N = parent.shape[0] - 1
    total = 0.0
    for v in range(N):
        f = flow[v]
        if f > 0.0 and parent[v] != N:
            p = parent[v]
            if v < n:
                total += f * _arc_cost(X, Y, v, p - n, torus)
            else:
                total += f * _arc_cost(X, Y, p, v - n, torus)
    return total


def _monotone_ids(X, Y, wx, wy, m):
    """Arc ids of the sorted quantile-overlap coupling (1D staircase)."""
    xo = np.argsort(X[:, 0], kind="stable")
    yo = np.argsort(Y[:, 0], kind="stable")
    cx = np.cumsum(wx[xo])
    cy = np.cumsum(wy[yo])
    ids = []
    i = j = 0
    while i < xo.shape[0] and j < yo.shape[0]:
        ids.append(xo[i] * m + yo[j])
        if cx[i] <= cy[j]:
            i += 1
        else:
            j += 1
    return np.asarray(ids, dtype=np.int64)


def _curve_order(P):
    """Sort order along an interleaved-bit (Morton) space-filling curve.

    Nearby ranks are nearby points, so the northwest-corner basis built on
    this order starts close to optimal; in 1D it degenerates to the exact
    coordinate sort, making the staircase start the true monotone solution.
    """
    n, d = P.shape
    if d == 1:
        return np.argsort(P[:, 0], kind="stable").astype(np.int64)
    bits = 63 // d
    scale = float(1 << bits)
    q = np.clip((P * scale).astype(np.uint64), 0, (1 << bits) - 1)
    code = np.zeros(n, dtype=np.uint64)
    for b in range(bits):
        for a in range(d):
            code |= ((q[:, a] >> np.uint64(b)) & np.uint64(1)) \
                << np.uint64(b * d + a)
    return np.argsort(code, kind="stable").astype(np.int64)


def _nw_links(X, Y, wx, wy):
    """Spanning warm-start links from the curve-ordered staircase."""
    return _nw_corner(_curve_order(X), _curve_order(Y), wx, wy)


def _grid_points(M, d):
    """Midpoint grid in C order; must match the library's grid builder
    bit for bit so detection can compare exact float values."""
    axis = (np.arange(M) + 0.5) / M
    if d == 1:
        return axis[:, None]
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _detect_grid(X):
    """Resolution M if X is exactly a C-ordered midpoint grid, else 0."""
    n, d = X.shape
    if d < 2 or n < 32:
        return 0
    M = int(round(n ** (1.0 / d)))
    for cand in (M - 1, M, M + 1):
        if cand >= 2 and cand**d == n and \
                np.array_equal(X, _grid_points(cand, d)):
            return cand
    return 0


def _grid_chain(M, d):
    """Coarse-to-fine resolutions, roughly halving per level while the
    coarser grid keeps enough cells to resolve the transport layout."""
    chain = [M]
    while True:
        M0 = (chain[0] + 1) // 2
        if M0 < 2 or M0**d < 128:
            return chain
        chain.insert(0, M0)


def _cell_partition(M, M0, d):
    """Assign fine cells to a coarser grid's cells, children in curve order.

    The coarse grid need not divide M: fine digit g maps to coarse digit
    g * M0 // M per axis.  Returns the per-fine-cell coarse id plus a CSR
    (order, ptr) listing each coarse cell's children.
    """
    g = np.indices((M,) * d).reshape(d, -1).T
    strides0 = M0 ** np.arange(d - 1, -1, -1, dtype=np.int64)
    cid = (g * M0 // M) @ strides0
    code = np.zeros(g.shape[0], dtype=np.uint64)
    bits = max(1, int(M - 1).bit_length())
    for b in range(bits):
        for a in range(d):
            code |= ((g[:, a].astype(np.uint64) >> np.uint64(b))
                     & np.uint64(1)) << np.uint64(b * d + a)
    order = np.lexsort((code, cid))
    ptr = np.zeros(M0**d + 1, np.int64)
    ptr[1:] = np.cumsum(np.bincount(cid, minlength=M0**d))
    return cid, order.astype(np.int64), ptr


@njit(cache=True, nogil=True)
def _refine_links(child_order, child_ptr, wxf, cell_ptr, arc_j, arc_f,
                  n_links):
    """Split each coarse cell's basis flows among its child cells.

    Runs a northwest-corner pass per cell between the children (curve
    order) and the cell's coarse arcs (target curve order).  The coarse
    basis is a spanning tree, so gluing the per-cell staircases at shared
    targets yields a spanning tree of the fine instance.
    """
    ncells = cell_ptr.shape[0] - 1
    ai = np.empty(n_links, np.int64)
    aj = np.empty(n_links, np.int64)
    af = np.empty(n_links, np.float64)
    t = 0
    for c in range(ncells):
        clo = child_ptr[c]
        chi = child_ptr[c + 1]
        lo = cell_ptr[c]
        hi = cell_ptr[c + 1]
        i = clo
        j = lo
        a = wxf[child_order[i]]
        b = arc_f[lo]
        while True:
            f = a if a < b else b
            ai[t] = child_order[i]
            aj[t] = arc_j[j]
            af[t] = f
            t += 1
            a -= f
            b -= f
            if i == chi - 1 and j == hi - 1:
                break
            if i == chi - 1:
                j += 1
                b = arc_f[j]
            elif j == hi - 1 or a == 0.0:
                i += 1
                a = wxf[child_order[i]]
            else:
                j += 1
                b = arc_f[j]
    return ai, aj, af, t


@njit(cache=True, nogil=True)
def _bfs_links(ai, aj, af, n, m):
    """Reorder spanning links into BFS discovery order from ai[0].

    The simplex core builds its tree by attaching one new node per link,
    which any spanning link set satisfies once BFS-ordered.
    """
    L = ai.shape[0]
    N = n + m
    ptr = np.zeros(N + 1, np.int64)
    for t in range(L):
        ptr[ai[t] + 1] += 1
        ptr[n + aj[t] + 1] += 1
    for v in range(N):
        ptr[v + 1] += ptr[v]
    adj = np.empty(2 * L, np.int64)
    fill = ptr.copy()
    for t in range(L):
        adj[fill[ai[t]]] = t
        fill[ai[t]] += 1
        adj[fill[n + aj[t]]] = t
        fill[n + aj[t]] += 1

    oi = np.empty(L, np.int64)
    oj = np.empty(L, np.int64)
    of = np.empty(L, np.float64)
    queue = np.empty(N, np.int64)
    seen = np.zeros(N, np.uint8)
    queue[0] = ai[0]
    seen[ai[0]] = 1
    head = 0
    tail = 1
    t = 0
    while head < tail:
        u = queue[head]
        head += 1
        for k in range(ptr[u], ptr[u + 1]):
            e = adj[k]
            p = ai[e]
            q = n + aj[e]
            w = q if p == u else p
            if seen[w] == 0:
                seen[w] = 1
                oi[t] = ai[e]
                oj[t] = aj[e]
                of[t] = af[e]
                t += 1
                queue[tail] = w
                tail += 1
    return oi, oj, of, t


def _refined_start(X, Y, wx, wy, torus, block, M, M0):
    """Warm-start links for a grid instance, refined from a coarser solve."""
    d = X.shape[1]
    n = X.shape[0]
    m = Y.shape[0]
    cid, child_order, child_ptr = _cell_partition(M, M0, d)
    Xc = _grid_points(M0, d)
    wxc = np.bincount(cid, weights=wx, minlength=M0**d)
    info = network_simplex(Xc, Y, wxc, wy, torus, block)[6]
    bi, bj, bf = info["basis"]

    yrank = np.empty(m, np.int64)
    yrank[_curve_order(Y)] = np.arange(m)
    order = np.lexsort((yrank[bj], bi))
    bi = bi[order]
    bj = bj[order]
    bf = bf[order]
    cell_ptr = np.zeros(M0**d + 1, np.int64)
    cell_ptr[1:] = np.cumsum(np.bincount(bi, minlength=M0**d))

    ai, aj, af, t = _refine_links(child_order, child_ptr, wx, cell_ptr,
                                  bj, bf, n + m - 1)
    if t != n + m - 1:
        raise RuntimeError("refinement produced a non-spanning link set")
    ai, aj, af, t = _bfs_links(ai, aj, af, n, m)
    if t != n + m - 1:
        raise RuntimeError("refined warm start is not connected")
    return ai, aj, af


def _seed_candidates(X, Y, wx, wy, torus, n, m):
    """Initial candidate arcs as (row, col) int32 arrays."""
    if n * m <= _SMALL_ARCS:
        ids = np.arange(n * m, dtype=np.int64)
    else:
        from scipy.spatial import cKDTree

        boxsize = 1.0 if torus else None
        k_t = min(_KNN, m)
        tree = cKDTree(Y, boxsize=boxsize)
        _, idx = tree.query(X, k=k_t, workers=-1)
        idx = idx.reshape(n, k_t)
        src = (np.arange(n, dtype=np.int64) * m)[:, None] + idx.astype(np.int64)
        k_s = min(_KNN, n)
        tree = cKDTree(X, boxsize=boxsize)
        _, idx = tree.query(Y, k=k_s, workers=-1)
        idx = idx.reshape(m, k_s)
        tgt = idx.astype(np.int64) * m + np.arange(m, dtype=np.int64)[:, None]
        parts = [src.ravel(), tgt.ravel()]
        if X.shape[1] == 1:
            # nearest neighbors track distance, not quantile rank, and the
            # 1D optimal support is the quantile staircase; seeding it
            # directly saves the sweeps that would rediscover it arc by arc
            parts.append(_monotone_ids(X, Y, wx, wy, m))
        ids = np.unique(np.concatenate(parts))
    rows = (ids // m).astype(np.int32)
    cols = (ids - ids // m * m).astype(np.int32)
    return rows, cols


def network_simplex(X, Y, wx, wy, torus, block=None):
    """Solve min <C, P> over couplings of (wx, wy) with squared-distance costs.

    Parameters
    ----------
    X, Y : ndarray, shape (n, d) and (m, d)
        Source and target support points.
    wx, wy : ndarray
        Strictly positive weights summing to the same total.
    torus : bool
        Use per-axis minimum-image squared distances when True.
    block : int, optional
        Pricing block size override (benchmarking hook).

    Returns
    -------
    row, col, vals : ndarray
        Support of an optimal basic coupling (at most n + m - 1 atoms).
    phi, psi : ndarray
        Optimal duals, phi[i] + psi[j] <= c_ij everywhere with equality on
        the support, normalized so max(phi) = 0.
    cost : float
    info : dict
        Keys "pivots", "sweeps" and "min_reduced_cost".

    Raises
    ------
    ValueError
        If a weight is not strictly positive (callers compact zero-weight
        atoms first; positivity keeps the starting basis strongly feasible).
    RuntimeError
        If a pivot or sweep guard trips or the final basis fails the exact
        feasibility check; callers may fall back to another engine.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    wx = np.ascontiguousarray(wx, dtype=np.float64)
    wy = np.ascontiguousarray(wy, dtype=np.float64)
    n, d = X.shape
    m = Y.shape[0]
    if wx.min() <= 0.0 or wy.min() <= 0.0:
        raise ValueError("weights must be strictly positive")

    # grid sources get a multiscale warm start: solve the same instance on
    # a coarsened grid and split each coarse cell's flows among its child
    # cells, so the fine solve starts near optimal and pivots stay local
    M = _detect_grid(X)
    chain = _grid_chain(M, d) if M else [M]
    if len(chain) > 1:
        ai, aj, af = _refined_start(X, Y, wx, wy, torus, block, M, chain[-2])
    else:
        ai, aj, af = _nw_links(X, Y, wx, wy)

    rows, cols = _seed_candidates(X, Y, wx, wy, torus, n, m)
    nseed = rows.shape[0]
    spare = max(0, min(n * m - nseed, 20 * _ROW_APPENDS * n))
    cand_i = np.empty(nseed + spare, dtype=np.int32)
    cand_j = np.empty(nseed + spare, dtype=np.int32)
    cand_c = np.empty(nseed + spare, dtype=np.float64)
    cand_i[:nseed] = rows
    cand_j[:nseed] = cols
    diff = X[rows.astype(np.int64)] - Y[cols.astype(np.int64)]
    if torus:
        diff = np.abs(diff)
        np.minimum(diff, 1.0 - diff, out=diff)
    cand_c[:nseed] = np.einsum("ij,ij->i", diff, diff)

    if block is None:
        block = max(1024, int(np.sqrt(nseed + spare)))
    enter_tol = 1e-13 * (1.0 + d)
    final_tol = 1e-12 * (1.0 + d)
    max_pivots = _PIVOT_FACTOR * (n + m) + _PIVOT_FLOOR

    status, pivots, sweeps, min_r, parent, pi, first_child, next_sib = \
        _simplex_core(X, Y, wx, wy, torus, ai, aj, af, cand_i, cand_j, cand_c,
                      nseed, block, enter_tol, final_tol, max_pivots)
    if status != 0:
        raise RuntimeError(
            f"network simplex stalled: pivots={pivots}, sweeps={sweeps}, "
            f"min reduced cost {min_r:.3e}")

    flow = _reflow(parent, first_child, next_sib, wx, wy)
    art = parent[:n + m] == n + m
    if np.abs(flow[:n + m][art]).max() > 1e-9:
        raise RuntimeError(
            f"artificial arc kept flow {np.abs(flow[:n + m][art]).max():.3e}")
    real = ~art
    if flow[:n + m][real].min() < -1e-9:
        raise RuntimeError(
            f"basis failed exact re-flow: min flow {flow[:n+m][real].min():.3e}")
    np.maximum(flow, 0.0, out=flow)

    cost = _tree_cost(X, Y, parent, flow, torus)

    nodes = np.nonzero((flow[:n + m] > 0.0) & real)[0]
    row = np.where(nodes < n, nodes, parent[nodes])
    col = np.where(nodes < n, parent[nodes], nodes) - n
    vals = flow[nodes]

    # full basis including zero-flow arcs; coarser levels of the multiscale
    # warm start refine this, which needs a spanning tree, not just support
    bnodes = np.nonzero(real)[0]
    bi = np.where(bnodes < n, bnodes, parent[bnodes]).astype(np.int64)
    bj = (np.where(bnodes < n, parent[bnodes], bnodes) - n).astype(np.int64)

    shift = pi[:n].max()
    phi = pi[:n] - shift
    psi = shift - pi[n:n + m]

    info = {
        "pivots": int(pivots),
        "sweeps": int(sweeps),
        "min_reduced_cost": float(min_r),
        "basis": (bi, bj, flow[bnodes]),
    }
    return row, col, vals, phi, psi, float(cost), info
