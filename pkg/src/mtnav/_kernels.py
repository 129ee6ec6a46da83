"""Numba kernels for the quasi-static discrete-rod solver.

The device chain is parameterized by absolute segment angles, which keeps
segment lengths exact by construction. Equilibrium is found by a damped
Gauss-Newton (Levenberg-Marquardt) descent on the sum-of-squares energy

    E = sum_j k_j (phi_j - phi_{j-1} - rest_j)^2 + sum_k k_wall * pen_k^2

where pen_k is the penetration of node k outside the vessel lumen. Steps are
accepted only if they do not increase E, so the per-solve energy trace is
non-increasing.
"""
import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_MAX_ITER = 1
STATUS_NON_FINITE = 2


@njit(cache=True)
def _clearance(px, py, ax, ay, bx, by, r0, r1):
    """Signed clearance of point to one lumen segment: dist to centerline - radius."""
    abx = bx - ax
    aby = by - ay
    apx = px - ax
    apy = py - ay
    denom = abx * abx + aby * aby
    t = 0.0
    if denom > 0.0:
        t = (apx * abx + apy * aby) / denom
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    cx = ax + t * abx
    cy = ay + t * aby
    dx = px - cx
    dy = py - cy
    d = np.sqrt(dx * dx + dy * dy)
    r = r0 + t * (r1 - r0)
    return d - r, d, dx, dy


GRID_SAFE_CLEARANCE = 2.5  # grid cells list every segment whose surface is closer than this
PEN_SMOOTH_MM = 0.02  # solver-side smoothing width of the wall penalty


@njit(cache=True)
def point_clearance(px, py, A, B, R0, R1, idxs):
    """Signed clearance to the union of listed lumens and its gradient direction."""
    best = 1.0e18
    bnx = 0.0
    bny = 0.0
    for ii in range(idxs.shape[0]):
        j = idxs[ii]
        sc, d, dx, dy = _clearance(px, py, A[j, 0], A[j, 1], B[j, 0], B[j, 1], R0[j], R1[j])
        if sc < best:
            best = sc
            if d > 0.0:
                bnx = dx / d
                bny = dy / d
            else:
                bnx = 0.0
                bny = 0.0
    return best, bnx, bny


@njit(cache=True)
def point_penetration(px, py, A, B, R0, R1, idxs):
    """Exact penetration depth and outward unit normal vs. the union of lumens."""
    c, bnx, bny = point_clearance(px, py, A, B, R0, R1, idxs)
    if c > 0.0:
        return c, bnx, bny
    return 0.0, 0.0, 0.0


@njit(cache=True)
def _clear_point(px, py, A, B, R0, R1, idxs, all_idx):
    """Grid-subset clearance with an exact rescan when outside the subset's
    guaranteed margin, keeping the field continuous across grid cells."""
    c, nxx, nyy = point_clearance(px, py, A, B, R0, R1, idxs)
    if c > GRID_SAFE_CLEARANCE and idxs.shape[0] != all_idx.shape[0]:
        return point_clearance(px, py, A, B, R0, R1, all_idx)
    return c, nxx, nyy


@njit(cache=True)
def _smooth_pen(c):
    """max(0, c) with a C1 Hermite blend over [-eps, eps]; exactly 0 below -eps."""
    eps = PEN_SMOOTH_MM
    if c <= -eps:
        return 0.0
    if c >= eps:
        return c
    return (c + eps) * (c + eps) / (4.0 * eps)


@njit(cache=True)
def _smooth_pen_grad(c):
    eps = PEN_SMOOTH_MM
    if c <= -eps:
        return 0.0
    if c >= eps:
        return 1.0
    return (c + eps) / (2.0 * eps)


@njit(cache=True)
def chain_positions(basex, basey, angles, seg):
    n = angles.shape[0]
    pos = np.empty((n + 1, 2))
    pos[0, 0] = basex
    pos[0, 1] = basey
    for i in range(n):
        pos[i + 1, 0] = pos[i, 0] + seg * np.cos(angles[i])
        pos[i + 1, 1] = pos[i, 1] + seg * np.sin(angles[i])
    return pos


@njit(cache=True)
def walk_polyline(src, bx, by, seg, n_new):
    """Place n_new+1 nodes with exact chord length seg along the polyline src,
    starting from (bx, by); walks past the end along the last direction.

    Returns (nodes, seg_index, seg_param) so callers can recover each node's
    location on src."""
    m = src.shape[0]
    best_d = 1.0e18
    ci = 0
    ct = 0.0
    for i in range(m - 1):
        ax, ay = src[i, 0], src[i, 1]
        ex, ey = src[i + 1, 0], src[i + 1, 1]
        dxs = ex - ax
        dys = ey - ay
        dn = dxs * dxs + dys * dys
        t = 0.0
        if dn > 0.0:
            t = ((bx - ax) * dxs + (by - ay) * dys) / dn
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
        dx = bx - (ax + t * dxs)
        dy = by - (ay + t * dys)
        d = dx * dx + dy * dy
        if d < best_d:
            best_d = d
            ci = i
            ct = t
    nodes = np.empty((n_new + 1, 2))
    segi = np.empty(n_new + 1, np.int64)
    segt = np.empty(n_new + 1)
    nodes[0, 0] = bx
    nodes[0, 1] = by
    segi[0] = ci
    segt[0] = ct
    cx, cy = bx, by
    for k in range(1, n_new + 1):
        placed = False
        i = ci
        tlo = ct
        while i < m - 1:
            ax, ay = src[i, 0], src[i, 1]
            ex, ey = src[i + 1, 0], src[i + 1, 1]
            dxs = ex - ax
            dys = ey - ay
            fx = ax - cx
            fy = ay - cy
            A = dxs * dxs + dys * dys
            Bq = 2.0 * (fx * dxs + fy * dys)
            Cq = fx * fx + fy * fy - seg * seg
            disc = Bq * Bq - 4.0 * A * Cq
            if disc >= 0.0 and A > 0.0:
                sq = np.sqrt(disc)
                for rsign in range(2):
                    if rsign == 0:
                        s = (-Bq - sq) / (2.0 * A)
                    else:
                        s = (-Bq + sq) / (2.0 * A)
                    if tlo - 1.0e-12 <= s <= 1.0 + 1.0e-12:
                        s2 = min(max(s, 0.0), 1.0)
                        nxp = ax + s2 * dxs
                        nyp = ay + s2 * dys
                        dd = (nxp - cx) ** 2 + (nyp - cy) ** 2
                        if dd > 1.0e-18:
                            cx, cy = nxp, nyp
                            ci = i
                            ct = s2
                            placed = True
                            break
                if placed:
                    break
            i += 1
            tlo = 0.0
        if not placed:
            ux = src[m - 1, 0] - src[m - 2, 0]
            uy = src[m - 1, 1] - src[m - 2, 1]
            un = np.sqrt(ux * ux + uy * uy)
            cx = cx + seg * ux / un
            cy = cy + seg * uy / un
            ci = m - 2
            ct = 1.0
        nodes[k, 0] = cx
        nodes[k, 1] = cy
        segi[k] = ci
        segt[k] = ct
    return nodes, segi, segt


@njit(cache=True)
def _node_candidates(px, py, gx0, gy0, cell, nx, ny, cell_start, cell_segs, all_idx):
    ix = int(np.floor((px - gx0) / cell))
    iy = int(np.floor((py - gy0) / cell))
    if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
        return all_idx
    c = iy * nx + ix
    lo = cell_start[c]
    hi = cell_start[c + 1]
    if hi == lo:
        return all_idx
    return cell_segs[lo:hi]


@njit(cache=True)
def all_penetrations(pos, A, B, R0, R1, gx0, gy0, cell, nx, ny, cell_start, cell_segs, all_idx):
    """Per-node penetration depths and outward normals (grid-accelerated)."""
    npts = pos.shape[0]
    pens = np.zeros(npts)
    norms = np.zeros((npts, 2))
    for k in range(npts):
        idxs = _node_candidates(pos[k, 0], pos[k, 1], gx0, gy0, cell, nx, ny,
                                cell_start, cell_segs, all_idx)
        c, nxx, nyy = _clear_point(pos[k, 0], pos[k, 1], A, B, R0, R1, idxs, all_idx)
        pens[k] = max(0.0, c)
        norms[k, 0] = nxx
        norms[k, 1] = nyy
    return pens, norms


@njit(cache=True)
def chain_energy(angles, ifree, basex, basey, seg, kj, rest, kwall,
                 A, B, R0, R1, gx0, gy0, cell, nx, ny, cell_start, cell_segs, all_idx):
    """Energy over the free window (segments >= ifree); frozen terms are constant."""
    n = angles.shape[0]
    E = 0.0
    for j in range(ifree, n):
        d = angles[j] - angles[j - 1] - rest[j]
        E += kj[j] * d * d
    pos = chain_positions(basex, basey, angles, seg)
    for k in range(ifree + 1, n + 1):
        idxs = _node_candidates(pos[k, 0], pos[k, 1], gx0, gy0, cell, nx, ny,
                                cell_start, cell_segs, all_idx)
        c, _, _ = _clear_point(pos[k, 0], pos[k, 1], A, B, R0, R1, idxs, all_idx)
        if c > -PEN_SMOOTH_MM:
            p = _smooth_pen(c)
            E += kwall * p * p
    return E


@njit(cache=True)
def solve_equilibrium(angles, ifree, basex, basey, seg, kj, rest, kwall,
                      A, B, R0, R1, gx0, gy0, cell, nx, ny, cell_start, cell_segs, all_idx,
                      max_iter, tol):
    """Relax free angles (segment index >= ifree) to a local energy minimum.

    Returns (angles, iterations, status, energy_trace, trace_len); the trace of
    accepted iterates is non-increasing.
    """
    n = angles.shape[0]
    nf = n - ifree
    trace = np.empty(max_iter + 1)
    E = chain_energy(angles, ifree, basex, basey, seg, kj, rest, kwall,
                     A, B, R0, R1, gx0, gy0, cell, nx, ny, cell_start, cell_segs, all_idx)
    trace[0] = E
    if nf <= 0 or E < 1.0e-18:
        return angles, 0, STATUS_OK, trace, 1
    lam = 1.0e-3
    status = STATUS_MAX_ITER
    it = 0
    tlen = 1
    while it < max_iter:
        it += 1
        if not np.isfinite(E):
            status = STATUS_NON_FINITE
            break
        pos = chain_positions(basex, basey, angles, seg)
        H = np.zeros((nf, nf))
        g = np.zeros(nf)
        # bending rows: joint j couples free angles j and j-1 (free idx = seg idx - ifree)
        for j in range(ifree, n):
            r = angles[j] - angles[j - 1] - rest[j]
            w = kj[j]
            fj = j - ifree
            g[fj] += w * r
            H[fj, fj] += w
            if j > ifree:
                fi = fj - 1
                g[fi] -= w * r
                H[fi, fi] += w
                H[fj, fi] -= w
                H[fi, fj] -= w
        # wall rows: only nodes currently penetrating contribute
        for k in range(ifree + 1, n + 1):
            idxs = _node_candidates(pos[k, 0], pos[k, 1], gx0, gy0, cell, nx, ny,
                                    cell_start, cell_segs, all_idx)
            c, nxx, nyy = _clear_point(pos[k, 0], pos[k, 1], A, B, R0, R1, idxs, all_idx)
            if c <= -PEN_SMOOTH_MM:
                continue
            p = _smooth_pen(c)
            dp = _smooth_pen_grad(c)
            # d pen_k / d phi_i = dp * n_hat . seg * u'(phi_i) for free segments i < k
            nfree_k = min(k, n) - ifree
            if nfree_k <= 0:
                continue
            w = np.empty(nfree_k)
            for i in range(ifree, min(k, n)):
                w[i - ifree] = dp * seg * (-np.sin(angles[i]) * nxx + np.cos(angles[i]) * nyy)
            for a_ in range(nfree_k):
                g[a_] += kwall * p * w[a_]
                for b_ in range(a_, nfree_k):
                    H[a_, b_] += kwall * w[a_] * w[b_]
                    if b_ != a_:
                        H[b_, a_] += kwall * w[a_] * w[b_]
        gmax = 0.0
        for a_ in range(nf):
            if np.abs(g[a_]) > gmax:
                gmax = np.abs(g[a_])
        if gmax < 1.0e-12:
            status = STATUS_OK
            break
        # damping loop: solve the LM system, backtrack along the step if needed,
        # accept only non-increasing energy
        accepted = False
        E_new = E
        for _try in range(12):
            Ad = np.empty((nf, nf))
            for a_ in range(nf):
                for b_ in range(nf):
                    Ad[a_, b_] = H[a_, b_]
                Ad[a_, a_] += lam * H[a_, a_] + lam * 1.0e-9
            dx = np.linalg.solve(Ad, -g)
            alpha = 1.0
            for _bt in range(8):
                cand = angles.copy()
                for a_ in range(nf):
                    cand[a_ + ifree] += alpha * dx[a_]
                E_new = chain_energy(cand, ifree, basex, basey, seg, kj, rest, kwall,
                                     A, B, R0, R1, gx0, gy0, cell, nx, ny,
                                     cell_start, cell_segs, all_idx)
                if np.isfinite(E_new) and E_new <= E:
                    angles = cand
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                if alpha == 1.0:
                    lam = max(lam * 0.25, 1.0e-10)
                break
            lam *= 10.0
            if lam > 1.0e12:
                break
        if not accepted:
            # stuck at a kink or numerical floor: treat as converged
            status = STATUS_OK
            break
        trace[tlen] = E_new
        tlen += 1
        if E - E_new < tol * (1.0 + E):
            status = STATUS_OK
            E = E_new
            break
        E = E_new
    return angles, it, status, trace, tlen
