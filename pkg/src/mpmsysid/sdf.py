"""Analytic signed distance functions for the table and rigid effectors.

A collider is packed into a flat float64 row so the compiled kernels can
evaluate it without Python objects:

    0      shape code (PLANE, BOX, CYLINDER, CAPSULE)
    1      friction slot (0 -> table coefficient, 1 -> effector coefficient)
    2:5    body origin in world
    5:14   body-to-world rotation, row major
    14:17  linear velocity
    17:20  angular velocity (world)
    20:23  shape centre in the body frame
    23     axis of cylinder / capsule in the shape frame (0, 1, 2)
    24:27  dimensions (box half extents, cylinder (r, half height),
           capsule (r, half length))

Every query returns the distance, the outward unit normal and the Hessian
of the distance (the normal's Jacobian), which the reverse pass needs.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from ._la import mm, mmt

PLANE = 0
BOX = 1
CYLINDER = 2
CAPSULE = 3
ROW = 32


@njit(cache=True, inline="always")
def _box_dn(b0, b1, b2, p0, p1, p2):
    q0 = abs(p0) - b0
    q1 = abs(p1) - b1
    q2 = abs(p2) - b2
    qmax = max(q0, max(q1, q2))
    if qmax > 0.0:
        u0 = (q0 if p0 >= 0.0 else -q0) if q0 > 0.0 else 0.0
        u1 = (q1 if p1 >= 0.0 else -q1) if q1 > 0.0 else 0.0
        u2 = (q2 if p2 >= 0.0 else -q2) if q2 > 0.0 else 0.0
        r = np.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
        return r, u0 / r, u1 / r, u2 / r
    if q0 >= q1 and q0 >= q2:
        return qmax, (1.0 if p0 >= 0.0 else -1.0), 0.0, 0.0
    if q1 >= q2:
        return qmax, 0.0, (1.0 if p1 >= 0.0 else -1.0), 0.0
    return qmax, 0.0, 0.0, (1.0 if p2 >= 0.0 else -1.0)


@njit(cache=True, inline="always")
def _cylinder_dn(r, hh, p0, p1, p2):
    # axis along p2
    rho = np.sqrt(p0 * p0 + p1 * p1)
    if rho > 0.0:
        e0 = p0 / rho
        e1 = p1 / rho
    else:
        e0 = 1.0
        e1 = 0.0
    sz = 1.0 if p2 >= 0.0 else -1.0
    q0 = rho - r
    q1 = abs(p2) - hh
    if q0 > 0.0 or q1 > 0.0:
        u0 = q0 if q0 > 0.0 else 0.0
        u1 = q1 if q1 > 0.0 else 0.0
        d = np.sqrt(u0 * u0 + u1 * u1)
        return d, u0 * e0 / d, u0 * e1 / d, u1 * sz / d
    if q0 >= q1:
        return q0, e0, e1, 0.0
    return q1, 0.0, 0.0, sz


@njit(cache=True, inline="always")
def _capsule_dn(r, hl, p0, p1, p2):
    t = min(max(p2, -hl), hl)
    w2 = p2 - t
    L = np.sqrt(p0 * p0 + p1 * p1 + w2 * w2)
    if L == 0.0:
        return -r, 1.0, 0.0, 0.0
    return L - r, p0 / L, p1 / L, w2 / L


@njit(cache=True, inline="always")
def _pick(axis, a, b, c):
    if axis == 0:
        return a
    if axis == 1:
        return b
    return c


@njit(cache=True)
def sdf_local_dn(code, axis, d0, d1, d2, p0, p1, p2):
    """Distance and outward normal in the shape frame, as scalars."""
    if code == PLANE:
        return p2, 0.0, 0.0, 1.0
    if code == BOX:
        return _box_dn(d0, d1, d2, p0, p1, p2)
    # permute so the axis is last: q = (p[a+1], p[a+2], p[a])
    q0 = _pick(axis, p1, p2, p0)
    q1 = _pick(axis, p2, p0, p1)
    q2 = _pick(axis, p0, p1, p2)
    if code == CYLINDER:
        d, m0, m1, m2 = _cylinder_dn(d0, d1, q0, q1, q2)
    else:
        d, m0, m1, m2 = _capsule_dn(d0, d1, q0, q1, q2)
    # inverse permutation
    return d, _pick(axis, m2, m1, m0), _pick(axis, m0, m2, m1), _pick(axis, m1, m0, m2)


@njit(cache=True)
def sdf_dn(col, x0, x1, x2):
    """World distance and normal of one collider row at a point."""
    r0 = x0 - col[2]
    r1 = x1 - col[3]
    r2 = x2 - col[4]
    # p = R^T r - centre
    p0 = col[5] * r0 + col[8] * r1 + col[11] * r2 - col[20]
    p1 = col[6] * r0 + col[9] * r1 + col[12] * r2 - col[21]
    p2 = col[7] * r0 + col[10] * r1 + col[13] * r2 - col[22]
    d, m0, m1, m2 = sdf_local_dn(int(col[0]), int(col[23]), col[24], col[25], col[26], p0, p1, p2)
    n0 = col[5] * m0 + col[6] * m1 + col[7] * m2
    n1 = col[8] * m0 + col[9] * m1 + col[10] * m2
    n2 = col[11] * m0 + col[12] * m1 + col[13] * m2
    return d, n0, n1, n2


@njit(cache=True)
def _hess_local(code, axis, dims, p):
    """Jacobian of the local normal, zero where the normal is piecewise constant."""
    H = np.zeros((3, 3))
    if code == PLANE:
        return H
    if code == BOX:
        q = np.empty(3)
        for k in range(3):
            q[k] = abs(p[k]) - dims[k]
        if max(q[0], max(q[1], q[2])) <= 0.0:
            return H
        d, n0, n1, n2 = _box_dn(dims[0], dims[1], dims[2], p[0], p[1], p[2])
        n = np.array([n0, n1, n2])
        for i in range(3):
            for j in range(3):
                e = 1.0 if (i == j and q[i] > 0.0) else 0.0
                H[i, j] = (e - n[i] * n[j]) / d
        return H
    a0 = (axis + 1) % 3
    a1 = (axis + 2) % 3
    idx = (a0, a1, axis)
    q = np.empty(3)
    for k in range(3):
        q[k] = p[idx[k]]
    Hq = np.zeros((3, 3))
    if code == CYLINDER:
        r = dims[0]
        hh = dims[1]
        rho = np.sqrt(q[0] * q[0] + q[1] * q[1])
        er = np.zeros(3)
        if rho > 0.0:
            er[0] = q[0] / rho
            er[1] = q[1] / rho
        else:
            er[0] = 1.0
        ez = np.zeros(3)
        ez[2] = 1.0 if q[2] >= 0.0 else -1.0
        Pxy = np.zeros((3, 3))
        if rho > 0.0:
            for i in range(2):
                for j in range(2):
                    Pxy[i, j] = ((1.0 if i == j else 0.0) - er[i] * er[j]) / rho
        c0 = rho - r
        c1 = abs(q[2]) - hh
        if c0 > 0.0 or c1 > 0.0:
            d, m0, m1, m2 = _cylinder_dn(r, hh, q[0], q[1], q[2])
            n = np.array([m0, m1, m2])
            u0 = c0 if c0 > 0.0 else 0.0
            for i in range(3):
                for j in range(3):
                    a = 0.0
                    if c0 > 0.0:
                        a += er[i] * er[j]
                    if c1 > 0.0:
                        a += ez[i] * ez[j]
                    Hq[i, j] = (a + u0 * Pxy[i, j] - n[i] * n[j]) / d
        elif c0 >= c1:
            Hq[:, :] = Pxy
    else:
        hl = dims[1]
        t = min(max(q[2], -hl), hl)
        w = q.copy()
        w[2] -= t
        L = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
        if L > 0.0:
            interior = abs(q[2]) < hl
            for i in range(3):
                for j in range(3):
                    e = 1.0 if i == j else 0.0
                    if interior and i == 2:
                        e = 0.0
                    Hq[i, j] = (e - w[i] * w[j] / (L * L)) / L
    for i in range(3):
        for j in range(3):
            H[idx[i], idx[j]] = Hq[i, j]
    return H


@njit(cache=True)
def sdf_local(code, axis, dims, p):
    d, n0, n1, n2 = sdf_local_dn(code, axis, dims[0], dims[1], dims[2], p[0], p[1], p[2])
    return d, np.array([n0, n1, n2]), _hess_local(code, axis, dims, p)


@njit(cache=True)
def sdf_world(col, x):
    """Distance, normal and normal Jacobian (allocating; off the hot path)."""
    R = col[5:14].copy().reshape((3, 3))
    p = np.empty(3)
    for i in range(3):
        acc = 0.0
        for k in range(3):
            acc += R[k, i] * (x[k] - col[2 + k])
        p[i] = acc - col[20 + i]
    d, n0, n1, n2 = sdf_dn(col, x[0], x[1], x[2])
    Hl = _hess_local(int(col[0]), int(col[23]), col[24:27], p)
    return d, np.array([n0, n1, n2]), mmt(mm(R, Hl), R)


@njit(cache=True, inline="always")
def point_velocity_s(col, x0, x1, x2):
    r0 = x0 - col[2]
    r1 = x1 - col[3]
    r2 = x2 - col[4]
    return (col[14] + col[18] * r2 - col[19] * r1,
            col[15] + col[19] * r0 - col[17] * r2,
            col[16] + col[17] * r1 - col[18] * r0)


@njit(cache=True)
def point_velocity(col, x):
    v0, v1, v2 = point_velocity_s(col, x[0], x[1], x[2])
    return np.array([v0, v1, v2])


@njit(cache=True)
def rotvec_to_matrix(w):
    th = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    K = np.zeros((3, 3))
    K[0, 1] = -w[2]
    K[0, 2] = w[1]
    K[1, 0] = w[2]
    K[1, 2] = -w[0]
    K[2, 0] = -w[1]
    K[2, 1] = w[0]
    out = np.eye(3)
    if th < 1e-12:
        return out + K
    a = np.sin(th) / th
    b = (1.0 - np.cos(th)) / (th * th)
    return out + a * K + b * mm(K, K)


@njit(cache=True)
def advance_collider(col0, t, out):
    """Pose of a collider moving at its constant twist for time t."""
    out[:] = col0
    for k in range(3):
        out[2 + k] = col0[2 + k] + col0[14 + k] * t
    w = col0[17:20] * t
    if w[0] != 0.0 or w[1] != 0.0 or w[2] != 0.0:
        Rn = mm(rotvec_to_matrix(w), col0[5:14].copy().reshape((3, 3)))
        out[5:14] = Rn.ravel()
