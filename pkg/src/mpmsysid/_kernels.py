"""Compiled MLS-MPM substep and its reverse.

One substep is split into three kernels (particle-to-grid, grid update,
grid-to-particle) that fill a workspace with every intermediate the
reverse substep consumes. The reverse substep assumes the workspace was
produced by a forward call on the same pre-step state.

Branches (yield / elastic, contact / none, separate / stick / slide) taken
in the forward call are frozen in the reverse call.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .constitutive import (RM_YIELDED, kirchhoff_to, kirchhoff_vjp_to, return_map_to,
                           return_map_vjp_to, svd3_to)
from ._la import usvt_to
from .sdf import advance_collider, point_velocity_s, sdf_dn, sdf_world

NO_CONTACT = 0
SEPARATE = 1
STICK = 2
SLIDE = 3

OK = 0
ERR_DOMAIN = 1
ERR_NAN = 2

# contact handling for particles
DETECT = 0
RECORD = 1
REPLAY = 2

# param-gradient slots
G_MU, G_LAM, G_SIGY, G_MASS, G_ETA_T, G_ETA_M = 0, 1, 2, 3, 4, 5


@njit(cache=True, inline="always")
def friction_s(v0, v1, v2, o0, o1, o2, n0, n1, n2, eta):
    """Coulomb projection of v against an obstacle moving at o with normal n."""
    r0 = v0 - o0
    r1 = v1 - o1
    r2 = v2 - o2
    vn = r0 * n0 + r1 * n1 + r2 * n2
    if vn >= 0.0:
        return v0, v1, v2, SEPARATE
    t0 = r0 - vn * n0
    t1 = r1 - vn * n1
    t2 = r2 - vn * n2
    tn = np.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
    if tn <= -eta * vn:
        return o0, o1, o2, STICK
    fac = 1.0 + eta * vn / tn
    return o0 + fac * t0, o1 + fac * t1, o2 + fac * t2, SLIDE


@njit(cache=True)
def friction(v, vo, n, eta):
    r0, r1, r2, br = friction_s(v[0], v[1], v[2], vo[0], vo[1], vo[2], n[0], n[1], n[2], eta)
    return np.array([r0, r1, r2]), br


@njit(cache=True, inline="always")
def friction_vjp_s(v0, v1, v2, o0, o1, o2, n0, n1, n2, eta, branch, g0, g1, g2):
    """Adjoints (g_v, g_vo, g_n, g_eta) of the frozen branch, flattened."""
    if branch == SEPARATE:
        return g0, g1, g2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    if branch == STICK:
        return 0.0, 0.0, 0.0, g0, g1, g2, 0.0, 0.0, 0.0, 0.0
    r0 = v0 - o0
    r1 = v1 - o1
    r2 = v2 - o2
    vn = r0 * n0 + r1 * n1 + r2 * n2
    t0 = r0 - vn * n0
    t1 = r1 - vn * n1
    t2 = r2 - vn * n2
    tn = np.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
    fac = 1.0 + eta * vn / tn
    g_fac = g0 * t0 + g1 * t1 + g2 * t2
    g_eta = g_fac * vn / tn
    g_vn = g_fac * eta / tn
    k = -g_fac * eta * vn / (tn * tn * tn)
    # adjoint of t
    a0 = fac * g0 + k * t0
    a1 = fac * g1 + k * t1
    a2 = fac * g2 + k * t2
    g_vn -= a0 * n0 + a1 * n1 + a2 * n2
    gr0 = a0 + g_vn * n0
    gr1 = a1 + g_vn * n1
    gr2 = a2 + g_vn * n2
    gn0 = -vn * a0 + g_vn * r0
    gn1 = -vn * a1 + g_vn * r1
    gn2 = -vn * a2 + g_vn * r2
    return gr0, gr1, gr2, g0 - gr0, g1 - gr1, g2 - gr2, gn0, gn1, gn2, g_eta


@njit(cache=True)
def friction_vjp(v, vo, n, eta, branch, g):
    """Returns adjoints (g_v, g_vo, g_n, g_eta) for the frozen branch."""
    o = friction_vjp_s(v[0], v[1], v[2], vo[0], vo[1], vo[2], n[0], n[1], n[2], eta,
                       branch, g[0], g[1], g[2])
    return (np.array([o[0], o[1], o[2]]), np.array([o[3], o[4], o[5]]),
            np.array([o[6], o[7], o[8]]), o[9])


@njit(cache=True, inline="always")
def bspline(fx, w, dw):
    """Quadratic B-spline weights and their derivatives in cell units."""
    for a in range(3):
        f = fx[a]
        w[0, a] = 0.5 * (1.5 - f) ** 2
        w[1, a] = 0.75 - (f - 1.0) ** 2
        w[2, a] = 0.5 * (f - 0.5) ** 2
        dw[0, a] = f - 1.5
        dw[1, a] = -2.0 * (f - 1.0)
        dw[2, a] = f - 0.5


@njit(cache=True)
def _in_bound(i, j, k, nx, ny, nz, bound):
    return i < bound or j < bound or k < bound or \
        i >= nx - bound or j >= ny - bound or k >= nz - bound


@njit(cache=True)
def p2g(x, v, C, F, gm, gp, base, fx, W, DW, Us, Ss, Vs, Fs, flags, A,
        lo, inv_dx, dt, mu, lam, sigy, mp, vol, bbox, apply_plasticity):
    """Trial F, return map, stress, scatter. Updates F in place.

    Returns (status, particle index).
    """
    N = x.shape[0]
    nx, ny, nz = gm.shape
    dx = 1.0 / inv_dx
    k_stress = dt * vol * 4.0 * inv_dx * inv_dx
    # an infinite yield strain makes every return map elastic
    c = sigy / (2.0 * mu) if apply_plasticity else np.inf
    Ftr = np.empty((3, 3))
    scr = np.empty((3, 3))
    tau = np.empty((3, 3))
    for p in range(N):
        for a in range(3):
            xg = (x[p, a] - lo[a]) * inv_dx
            if not np.isfinite(xg):
                return ERR_NAN, p
            b = int(np.floor(xg - 0.5))
            base[p, a] = b
            fx[p, a] = xg - b
        if base[p, 0] < 0 or base[p, 1] < 0 or base[p, 2] < 0 or \
                base[p, 0] + 2 >= nx or base[p, 1] + 2 >= ny or base[p, 2] + 2 >= nz:
            return ERR_DOMAIN, p
    # bounding box of the touched nodes
    for a in range(3):
        bbox[a] = base[0, a]
        bbox[3 + a] = base[0, a] + 2
    for p in range(1, N):
        for a in range(3):
            bbox[a] = min(bbox[a], base[p, a])
            bbox[3 + a] = max(bbox[3 + a], base[p, a] + 2)
    for i in range(bbox[0], bbox[3] + 1):
        for j in range(bbox[1], bbox[4] + 1):
            for k in range(bbox[2], bbox[5] + 1):
                gm[i, j, k] = 0.0
                gp[i, j, k, 0] = 0.0
                gp[i, j, k, 1] = 0.0
                gp[i, j, k, 2] = 0.0
    for p in range(N):
        Wp = W[p]
        bspline(fx[p], Wp, DW[p])
        Fp = F[p]
        Cp = C[p]
        for i in range(3):
            for j in range(3):
                Ftr[i, j] = Fp[i, j] + dt * (Cp[i, 0] * Fp[0, j] + Cp[i, 1] * Fp[1, j] + Cp[i, 2] * Fp[2, j])
        U = Us[p]
        s = Ss[p]
        V = Vs[p]
        f = Fs[p]
        svd3_to(Ftr, U, s, V, scr)
        if not s[2] > 0.0:
            return ERR_NAN, p
        flag, dg = return_map_to(s, c, f)
        flags[p] = flag
        if flag == RM_YIELDED:
            usvt_to(U, f, V, Fp)
        else:
            for i in range(3):
                for j in range(3):
                    Fp[i, j] = Ftr[i, j]
        kirchhoff_to(Fp, U, f, V, mu, lam, tau)
        Ap = A[p]
        for i in range(3):
            for j in range(3):
                Ap[i, j] = mp * Cp[i, j] - k_stress * tau[i, j]
        mv0 = mp * v[p, 0]
        mv1 = mp * v[p, 1]
        mv2 = mp * v[p, 2]
        for o0 in range(3):
            d0 = (o0 - fx[p, 0]) * dx
            i = base[p, 0] + o0
            for o1 in range(3):
                d1 = (o1 - fx[p, 1]) * dx
                j = base[p, 1] + o1
                w01 = Wp[o0, 0] * Wp[o1, 1]
                for o2 in range(3):
                    d2 = (o2 - fx[p, 2]) * dx
                    k = base[p, 2] + o2
                    wgt = w01 * Wp[o2, 2]
                    gm[i, j, k] += wgt * mp
                    gp[i, j, k, 0] += wgt * (mv0 + Ap[0, 0] * d0 + Ap[0, 1] * d1 + Ap[0, 2] * d2)
                    gp[i, j, k, 1] += wgt * (mv1 + Ap[1, 0] * d0 + Ap[1, 1] * d1 + Ap[1, 2] * d2)
                    gp[i, j, k, 2] += wgt * (mv2 + Ap[2, 0] * d0 + Ap[2, 1] * d1 + Ap[2, 2] * d2)
    return OK, -1


@njit(cache=True)
def grid_update(gm, gp, gv, gvh, gnv, gnf, bbox, lo, dx, dt, gravity, cols, etas, bound):
    nx, ny, nz = gm.shape
    ncol = cols.shape[0]
    for i in range(bbox[0], bbox[3] + 1):
        x0 = lo[0] + i * dx
        for j in range(bbox[1], bbox[4] + 1):
            x1 = lo[1] + j * dx
            for k in range(bbox[2], bbox[5] + 1):
                m = gm[i, j, k]
                if m <= 0.0:
                    gv[i, j, k, 0] = 0.0
                    gv[i, j, k, 1] = 0.0
                    gv[i, j, k, 2] = 0.0
                    for c in range(ncol):
                        gnf[i, j, k, c] = NO_CONTACT
                    continue
                x2 = lo[2] + k * dx
                u0 = gp[i, j, k, 0] / m + dt * gravity[0]
                u1 = gp[i, j, k, 1] / m + dt * gravity[1]
                u2 = gp[i, j, k, 2] / m + dt * gravity[2]
                gvh[i, j, k, 0] = u0
                gvh[i, j, k, 1] = u1
                gvh[i, j, k, 2] = u2
                for c in range(ncol):
                    col = cols[c]
                    d, n0, n1, n2 = sdf_dn(col, x0, x1, x2)
                    if d <= 0.0:
                        gnv[i, j, k, c, 0] = u0
                        gnv[i, j, k, c, 1] = u1
                        gnv[i, j, k, c, 2] = u2
                        o0, o1, o2 = point_velocity_s(col, x0, x1, x2)
                        u0, u1, u2, br = friction_s(u0, u1, u2, o0, o1, o2, n0, n1, n2,
                                                    etas[int(col[1])])
                        gnf[i, j, k, c] = br
                    else:
                        gnf[i, j, k, c] = NO_CONTACT
                if _in_bound(i, j, k, nx, ny, nz, bound):
                    u0 = 0.0
                    u1 = 0.0
                    u2 = 0.0
                gv[i, j, k, 0] = u0
                gv[i, j, k, 1] = u1
                gv[i, j, k, 2] = u2


@njit(cache=True)
def g2p(x, v, C, gv, base, fx, W, vt, pvin, pflag, inv_dx, dt, cols, etas,
        contact_mode, crow):
    N = x.shape[0]
    ncol = cols.shape[0]
    dx = 1.0 / inv_dx
    kappa = 4.0 * inv_dx * inv_dx
    B = np.empty((3, 3))
    for p in range(N):
        Wp = W[p]
        u0 = 0.0
        u1 = 0.0
        u2 = 0.0
        for r in range(3):
            B[r, 0] = 0.0
            B[r, 1] = 0.0
            B[r, 2] = 0.0
        for o0 in range(3):
            d0 = (o0 - fx[p, 0]) * dx
            i = base[p, 0] + o0
            for o1 in range(3):
                d1 = (o1 - fx[p, 1]) * dx
                j = base[p, 1] + o1
                w01 = Wp[o0, 0] * Wp[o1, 1]
                for o2 in range(3):
                    d2 = (o2 - fx[p, 2]) * dx
                    k = base[p, 2] + o2
                    wgt = w01 * Wp[o2, 2]
                    for r in range(3):
                        g = wgt * gv[i, j, k, r]
                        B[r, 0] += g * d0
                        B[r, 1] += g * d1
                        B[r, 2] += g * d2
                    u0 += wgt * gv[i, j, k, 0]
                    u1 += wgt * gv[i, j, k, 1]
                    u2 += wgt * gv[i, j, k, 2]
        vt[p, 0] = u0
        vt[p, 1] = u1
        vt[p, 2] = u2
        x0 = x[p, 0]
        x1 = x[p, 1]
        x2 = x[p, 2]
        bits = 0
        for c in range(ncol):
            col = cols[c]
            d, n0, n1, n2 = sdf_dn(col, x0, x1, x2)
            if contact_mode == REPLAY:
                hit = (crow[p] >> c) & 1 == 1
            else:
                hit = d <= 0.0
            if hit:
                bits |= 1 << c
                pvin[p, c, 0] = u0
                pvin[p, c, 1] = u1
                pvin[p, c, 2] = u2
                o0, o1, o2 = point_velocity_s(col, x0, x1, x2)
                u0, u1, u2, br = friction_s(u0, u1, u2, o0, o1, o2, n0, n1, n2,
                                            etas[int(col[1])])
                pflag[p, c] = br
            else:
                pflag[p, c] = NO_CONTACT
        if contact_mode == RECORD:
            crow[p] = bits
        if not (np.isfinite(u0) and np.isfinite(u1) and np.isfinite(u2)):
            return ERR_NAN, p
        v[p, 0] = u0
        v[p, 1] = u1
        v[p, 2] = u2
        x[p, 0] = x0 + dt * u0
        x[p, 1] = x1 + dt * u1
        x[p, 2] = x2 + dt * u2
        for r in range(3):
            for s in range(3):
                C[p, r, s] = kappa * B[r, s]
    return OK, -1


@njit(cache=True)
def substep(x, v, C, F, grid, ws, cols, lo, dx, dt, gravity, mu, lam, sigy, mp, vol,
            etas, bound, apply_plasticity, contact_mode, crow):
    gm, gp, gv, gvh, gnv, gnf = grid
    base, fx, W, DW, Us, Ss, Vs, Fs, flags, A, vt, pvin, pflag, bbox = ws
    inv_dx = 1.0 / dx
    st, idx = p2g(x, v, C, F, gm, gp, base, fx, W, DW, Us, Ss, Vs, Fs, flags, A,
                  lo, inv_dx, dt, mu, lam, sigy, mp, vol, bbox, apply_plasticity)
    if st != OK:
        return st, idx
    grid_update(gm, gp, gv, gvh, gnv, gnf, bbox, lo, dx, dt, gravity, cols, etas, bound)
    return g2p(x, v, C, gv, base, fx, W, vt, pvin, pflag, inv_dx, dt, cols, etas,
               contact_mode, crow)


@njit(cache=True)
def run_frame(x, v, C, F, grid, ws, cols0, cols, lo, dx, dt, n_sub, gravity, mu, lam,
              sigy, mp, vol, etas, bound, apply_plasticity, contact_mode, cbuf, crow0,
              store, sx, sv, sC, sF):
    """Runs n_sub substeps. cols0 holds collider poses at the frame start.

    When store is true the pre-step state of every substep is written to
    sx/sv/sC/sF. Returns (status, particle, substep).
    """
    ncol = cols0.shape[0]
    for s in range(n_sub):
        for c in range(ncol):
            advance_collider(cols0[c], (s + 1) * dt, cols[c])
        if store:
            sx[s] = x
            sv[s] = v
            sC[s] = C
            sF[s] = F
        st, idx = substep(x, v, C, F, grid, ws, cols, lo, dx, dt, gravity, mu, lam, sigy,
                          mp, vol, etas, bound, apply_plasticity, contact_mode,
                          cbuf[crow0 + s if contact_mode != DETECT else 0])
        if st != OK:
            return st, idx, s
    return OK, -1, -1


@njit(cache=True)
def substep_backward(x, v, C, F, grid, ws, cols, lo, dx, dt, mu, lam, sigy, mp, vol,
                     etas, bound, gx, gv_, gC, gF, ag, agm, pgrad):
    """Reverse of one substep.

    (x, v, C, F) is the pre-step state and ws/grid the matching forward
    workspace. On entry gx, gv_, gC, gF hold the adjoint of the post-step
    state; on exit they hold the adjoint of the pre-step state. Parameter
    adjoints are accumulated into pgrad. Returns a status code.
    """
    gm, gp, gvg, gvh, gnv, gnf = grid
    base, fx, W, DW, Us, Ss, Vs, Fs, flags, A, vt, pvin, pflag, bbox = ws
    N = x.shape[0]
    nx, ny, nz = gm.shape
    ncol = cols.shape[0]
    inv_dx = 1.0 / dx
    kappa = 4.0 * inv_dx * inv_dx
    k_stress = dt * vol * 4.0 * inv_dx * inv_dx
    c_y = sigy / (2.0 * mu)
    T = np.empty((8, 3, 3))
    gB = np.empty((3, 3))
    gA = np.empty((3, 3))
    FE = np.empty((3, 3))
    dFE = np.empty((3, 3))
    gFtr = np.empty((3, 3))

    for i in range(bbox[0], bbox[3] + 1):
        for j in range(bbox[1], bbox[4] + 1):
            for k in range(bbox[2], bbox[5] + 1):
                agm[i, j, k] = 0.0
                ag[i, j, k, 0] = 0.0
                ag[i, j, k, 1] = 0.0
                ag[i, j, k, 2] = 0.0

    # advection, particle contacts, grid-to-particle
    for p in range(N):
        g0 = gv_[p, 0] + dt * gx[p, 0]
        g1 = gv_[p, 1] + dt * gx[p, 1]
        g2 = gv_[p, 2] + dt * gx[p, 2]
        x0 = x[p, 0]
        x1 = x[p, 1]
        x2 = x[p, 2]
        for c in range(ncol - 1, -1, -1):
            br = pflag[p, c]
            if br == NO_CONTACT:
                continue
            col = cols[c]
            slot = int(col[1])
            d, n0, n1, n2 = sdf_dn(col, x0, x1, x2)
            o0, o1, o2 = point_velocity_s(col, x0, x1, x2)
            g0, g1, g2, q0, q1, q2, m0, m1, m2, g_eta = friction_vjp_s(
                pvin[p, c, 0], pvin[p, c, 1], pvin[p, c, 2], o0, o1, o2, n0, n1, n2,
                etas[slot], br, g0, g1, g2)
            pgrad[G_ETA_T + slot] += g_eta
            if br == SLIDE and (m0 != 0.0 or m1 != 0.0 or m2 != 0.0):
                d, n, H = sdf_world(col, x[p])
                for r in range(3):
                    gx[p, r] += H[r, 0] * m0 + H[r, 1] * m1 + H[r, 2] * m2
            # obstacle velocity w x (x - origin)
            gx[p, 0] += q1 * col[19] - q2 * col[18]
            gx[p, 1] += q2 * col[17] - q0 * col[19]
            gx[p, 2] += q0 * col[18] - q1 * col[17]
        for r in range(3):
            for s in range(3):
                gB[r, s] = kappa * gC[p, r, s]
        Wp = W[p]
        DWp = DW[p]
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for o0 in range(3):
            d0 = (o0 - fx[p, 0]) * dx
            i = base[p, 0] + o0
            for o1 in range(3):
                d1 = (o1 - fx[p, 1]) * dx
                j = base[p, 1] + o1
                for o2 in range(3):
                    d2 = (o2 - fx[p, 2]) * dx
                    k = base[p, 2] + o2
                    w0 = Wp[o0, 0]
                    w1 = Wp[o1, 1]
                    w2 = Wp[o2, 2]
                    wgt = w0 * w1 * w2
                    h0 = g0 + gB[0, 0] * d0 + gB[0, 1] * d1 + gB[0, 2] * d2
                    h1 = g1 + gB[1, 0] * d0 + gB[1, 1] * d1 + gB[1, 2] * d2
                    h2 = g2 + gB[2, 0] * d0 + gB[2, 1] * d1 + gB[2, 2] * d2
                    ag[i, j, k, 0] += wgt * h0
                    ag[i, j, k, 1] += wgt * h1
                    ag[i, j, k, 2] += wgt * h2
                    u0 = gvg[i, j, k, 0]
                    u1 = gvg[i, j, k, 1]
                    u2 = gvg[i, j, k, 2]
                    gW = (u0 * h0 + u1 * h1 + u2 * h2) * inv_dx
                    a0 -= wgt * (gB[0, 0] * u0 + gB[1, 0] * u1 + gB[2, 0] * u2)
                    a1 -= wgt * (gB[0, 1] * u0 + gB[1, 1] * u1 + gB[2, 1] * u2)
                    a2 -= wgt * (gB[0, 2] * u0 + gB[1, 2] * u1 + gB[2, 2] * u2)
                    a0 += gW * DWp[o0, 0] * w1 * w2
                    a1 += gW * w0 * DWp[o1, 1] * w2
                    a2 += gW * w0 * w1 * DWp[o2, 2]
        gx[p, 0] += a0
        gx[p, 1] += a1
        gx[p, 2] += a2

    # grid update
    for i in range(bbox[0], bbox[3] + 1):
        x0 = lo[0] + i * dx
        for j in range(bbox[1], bbox[4] + 1):
            x1 = lo[1] + j * dx
            for k in range(bbox[2], bbox[5] + 1):
                m = gm[i, j, k]
                if m <= 0.0:
                    continue
                x2 = lo[2] + k * dx
                if _in_bound(i, j, k, nx, ny, nz, bound):
                    g0 = 0.0
                    g1 = 0.0
                    g2 = 0.0
                else:
                    g0 = ag[i, j, k, 0]
                    g1 = ag[i, j, k, 1]
                    g2 = ag[i, j, k, 2]
                for c in range(ncol - 1, -1, -1):
                    br = gnf[i, j, k, c]
                    if br == NO_CONTACT:
                        continue
                    col = cols[c]
                    slot = int(col[1])
                    d, n0, n1, n2 = sdf_dn(col, x0, x1, x2)
                    o0, o1, o2 = point_velocity_s(col, x0, x1, x2)
                    g0, g1, g2, q0, q1, q2, m0, m1, m2, g_eta = friction_vjp_s(
                        gnv[i, j, k, c, 0], gnv[i, j, k, c, 1], gnv[i, j, k, c, 2],
                        o0, o1, o2, n0, n1, n2, etas[slot], br, g0, g1, g2)
                    pgrad[G_ETA_T + slot] += g_eta
                agm[i, j, k] = -(g0 * gp[i, j, k, 0] + g1 * gp[i, j, k, 1] + g2 * gp[i, j, k, 2]) / (m * m)
                ag[i, j, k, 0] = g0 / m
                ag[i, j, k, 1] = g1 / m
                ag[i, j, k, 2] = g2 / m

    # particle-to-grid and the constitutive chain
    for p in range(N):
        Ap = A[p]
        Wp = W[p]
        DWp = DW[p]
        for r in range(3):
            for s in range(3):
                gA[r, s] = 0.0
        gvi0 = 0.0
        gvi1 = 0.0
        gvi2 = 0.0
        gmp = 0.0
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        mv0 = mp * v[p, 0]
        mv1 = mp * v[p, 1]
        mv2 = mp * v[p, 2]
        for o0 in range(3):
            d0 = (o0 - fx[p, 0]) * dx
            i = base[p, 0] + o0
            for o1 in range(3):
                d1 = (o1 - fx[p, 1]) * dx
                j = base[p, 1] + o1
                for o2 in range(3):
                    d2 = (o2 - fx[p, 2]) * dx
                    k = base[p, 2] + o2
                    w0 = Wp[o0, 0]
                    w1 = Wp[o1, 1]
                    w2 = Wp[o2, 2]
                    wgt = w0 * w1 * w2
                    e0 = ag[i, j, k, 0]
                    e1 = ag[i, j, k, 1]
                    e2 = ag[i, j, k, 2]
                    gmn = agm[i, j, k]
                    q0 = mv0 + Ap[0, 0] * d0 + Ap[0, 1] * d1 + Ap[0, 2] * d2
                    q1 = mv1 + Ap[1, 0] * d0 + Ap[1, 1] * d1 + Ap[1, 2] * d2
                    q2 = mv2 + Ap[2, 0] * d0 + Ap[2, 1] * d1 + Ap[2, 2] * d2
                    gW = (e0 * q0 + e1 * q1 + e2 * q2 + gmn * mp) * inv_dx
                    h0 = wgt * e0
                    h1 = wgt * e1
                    h2 = wgt * e2
                    gvi0 += mp * h0
                    gvi1 += mp * h1
                    gvi2 += mp * h2
                    gA[0, 0] += h0 * d0
                    gA[0, 1] += h0 * d1
                    gA[0, 2] += h0 * d2
                    gA[1, 0] += h1 * d0
                    gA[1, 1] += h1 * d1
                    gA[1, 2] += h1 * d2
                    gA[2, 0] += h2 * d0
                    gA[2, 1] += h2 * d1
                    gA[2, 2] += h2 * d2
                    a0 -= Ap[0, 0] * h0 + Ap[1, 0] * h1 + Ap[2, 0] * h2
                    a1 -= Ap[0, 1] * h0 + Ap[1, 1] * h1 + Ap[2, 1] * h2
                    a2 -= Ap[0, 2] * h0 + Ap[1, 2] * h1 + Ap[2, 2] * h2
                    gmp += h0 * v[p, 0] + h1 * v[p, 1] + h2 * v[p, 2] + wgt * gmn
                    a0 += gW * DWp[o0, 0] * w1 * w2
                    a1 += gW * w0 * DWp[o1, 1] * w2
                    a2 += gW * w0 * w1 * DWp[o2, 2]
        gx[p, 0] += a0
        gx[p, 1] += a1
        gx[p, 2] += a2
        for r in range(3):
            for s in range(3):
                gmp += gA[r, s] * C[p, r, s]
                gC[p, r, s] = mp * gA[r, s]
                gA[r, s] *= -k_stress   # now the adjoint of tau
        U = Us[p]
        s_ = Ss[p]
        V = Vs[p]
        f = Fs[p]
        usvt_to(U, f, V, FE)
        dmu, dlam = kirchhoff_vjp_to(FE, U, f, V, mu, lam, gA, dFE, T)
        pgrad[G_MU] += dmu
        pgrad[G_LAM] += dlam
        for r in range(3):
            for s in range(3):
                dFE[r, s] += gF[p, r, s]
        dc = return_map_vjp_to(U, s_, V, f, flags[p], c_y, dFE, gFtr, T)
        pgrad[G_SIGY] += dc / (2.0 * mu)
        pgrad[G_MU] -= dc * sigy / (2.0 * mu * mu)
        Cp = C[p]
        Fp = F[p]
        for r in range(3):
            for s in range(3):
                gC[p, r, s] += dt * (
                    gFtr[r, 0] * Fp[s, 0] + gFtr[r, 1] * Fp[s, 1] + gFtr[r, 2] * Fp[s, 2])
                gF[p, r, s] = gFtr[r, s] + dt * (
                    Cp[0, r] * gFtr[0, s] + Cp[1, r] * gFtr[1, s] + Cp[2, r] * gFtr[2, s])
        gv_[p, 0] = gvi0
        gv_[p, 1] = gvi1
        gv_[p, 2] = gvi2
        pgrad[G_MASS] += gmp
    for p in range(N):
        ssum = 0.0
        for r in range(3):
            ssum += gx[p, r] + gv_[p, r]
            for s in range(3):
                ssum += gC[p, r, s] + gF[p, r, s]
        if not np.isfinite(ssum):
            return ERR_NAN
    return OK


@njit(cache=True)
def backward_frame(sx, sv, sC, sF, x, v, C, F, grid, ws, cols0, cols, lo, dx, dt, n_sub,
                   gravity, mu, lam, sigy, mp, vol, etas, bound, apply_plasticity,
                   contact_mode, cbuf, crow0, gx, gv_, gC, gF, ag, agm, pgrad):
    """Reverse of a frame whose pre-step states are stored in sx/sv/sC/sF.

    x/v/C/F are scratch buffers. Returns (status, substep).
    """
    ncol = cols0.shape[0]
    for s in range(n_sub - 1, -1, -1):
        for c in range(ncol):
            advance_collider(cols0[c], (s + 1) * dt, cols[c])
        x[:] = sx[s]
        v[:] = sv[s]
        C[:] = sC[s]
        F[:] = sF[s]
        mode = REPLAY if contact_mode == REPLAY else DETECT
        st, idx = substep(x, v, C, F, grid, ws, cols, lo, dx, dt, gravity, mu, lam, sigy,
                          mp, vol, etas, bound, apply_plasticity, mode,
                          cbuf[crow0 + s if mode != DETECT else 0])
        if st != OK:
            return st, s
        st = substep_backward(sx[s], sv[s], sC[s], sF[s], grid, ws, cols, lo, dx, dt, mu,
                              lam, sigy, mp, vol, etas, bound, gx, gv_, gC, gF, ag, agm,
                              pgrad)
        if st != OK:
            return st, s
    return OK, -1
