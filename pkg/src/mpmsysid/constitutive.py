"""Fixed-corotated elasticity and von Mises plasticity for one particle.

The compiled kernels here are shared by the simulator and by the reverse
pass, so every forward routine has a matching vector-Jacobian product.
All matrix functions used by the model are isotropic (they act on the
singular values only), which keeps their derivatives well defined at
repeated singular values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._la import det3, mm_to, mmt_to, mtm_to, usvt
from .errors import DegenerateMatrixError, DomainError

RM_ELASTIC = 0
RM_YIELDED = 1
RM_DEGENERATE = 2


@dataclass(frozen=True)
class LameParams:
    mu: float
    lam: float


@dataclass
class DeformationState:
    F_E: np.ndarray
    F_trial: np.ndarray = None

    def __post_init__(self):
        self.F_E = np.asarray(self.F_E, dtype=np.float64).reshape(3, 3)
        if self.F_trial is None:
            self.F_trial = self.F_E.copy()
        else:
            self.F_trial = np.asarray(self.F_trial, dtype=np.float64).reshape(3, 3)

    @property
    def J_E(self) -> float:
        return float(np.linalg.det(self.F_E))


@dataclass
class PlasticProjection:
    hencky_trial: np.ndarray
    deviatoric: np.ndarray
    delta_gamma: float
    yielded: bool
    degenerate: bool = field(default=False)


def lame_from_moduli(E: float, nu: float) -> LameParams:
    if not E > 0:
        raise DomainError(f"Young's modulus must be positive, got {E}")
    if not (0.0 <= nu < 0.5):
        raise DomainError(f"Poisson's ratio must lie in [0, 0.5), got {nu}")
    return LameParams(E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))


def lame_jacobian(E: float, nu: float) -> np.ndarray:
    """d(mu, lam)/d(E, nu) as a 2x2 array."""
    a = 1.0 + nu
    b = 1.0 - 2.0 * nu
    return np.array([
        [1.0 / (2.0 * a), -E / (2.0 * a * a)],
        [nu / (a * b), E * (1.0 + 2.0 * nu * nu) / (a * a * b * b)],
    ])


# ---------------------------------------------------------------- SVD


@njit(cache=True)
def svd3_to(F, U, s, V, A):
    """One-sided Jacobi SVD with det(U) = det(V) = +1, written into U, s, V.

    Singular values are sorted in descending order (stable, so equal values
    keep input column order). For det(F) < 0 the last singular value is
    negative. A is a 3x3 scratch buffer.
    """
    for r in range(3):
        for k in range(3):
            A[r, k] = F[r, k]
            V[r, k] = 1.0 if r == k else 0.0
    for _ in range(40):
        rotated = False
        for pair in range(3):
            if pair == 0:
                i, j = 0, 1
            elif pair == 1:
                i, j = 0, 2
            else:
                i, j = 1, 2
            alpha = A[0, i] * A[0, i] + A[1, i] * A[1, i] + A[2, i] * A[2, i]
            beta = A[0, j] * A[0, j] + A[1, j] * A[1, j] + A[2, j] * A[2, j]
            gamma = A[0, i] * A[0, j] + A[1, i] * A[1, j] + A[2, i] * A[2, j]
            if gamma == 0.0 or abs(gamma) <= 1e-15 * np.sqrt(alpha * beta):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            sgn = 1.0 if zeta >= 0.0 else -1.0
            t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = c * t
            for k in range(3):
                ai = A[k, i]
                aj = A[k, j]
                A[k, i] = c * ai - sn * aj
                A[k, j] = sn * ai + c * aj
                vi = V[k, i]
                vj = V[k, j]
                V[k, i] = c * vi - sn * vj
                V[k, j] = sn * vi + c * vj
        if not rotated:
            break
    for k in range(3):
        s[k] = np.sqrt(A[0, k] * A[0, k] + A[1, k] * A[1, k] + A[2, k] * A[2, k])
    # stable descending insertion sort of three columns
    o0, o1, o2 = 0, 1, 2
    if s[o1] > s[o0]:
        o0, o1 = o1, o0
    if s[o2] > s[o1]:
        o1, o2 = o2, o1
        if s[o1] > s[o0]:
            o0, o1 = o1, o0
    s0, s1, s2 = s[o0], s[o1], s[o2]
    # sorted A goes to U for now, V is permuted through A
    for r in range(3):
        U[r, 0] = A[r, o0]
        U[r, 1] = A[r, o1]
        U[r, 2] = A[r, o2]
    for r in range(3):
        for k in range(3):
            A[r, k] = V[r, k]
    for r in range(3):
        V[r, 0] = A[r, o0]
        V[r, 1] = A[r, o1]
        V[r, 2] = A[r, o2]
    if det3(V) < 0.0:
        for r in range(3):
            V[r, 2] = -V[r, 2]
            U[r, 2] = -U[r, 2]
    a2x, a2y, a2z = U[0, 2], U[1, 2], U[2, 2]
    if s0 > 0.0:
        for r in range(3):
            U[r, 0] /= s0
    else:
        U[0, 0] = 1.0
        U[1, 0] = 0.0
        U[2, 0] = 0.0
    if s1 > 0.0:
        for r in range(3):
            U[r, 1] /= s1
    else:
        # complete a degenerate second column
        if abs(U[1, 0]) < 0.9:
            e0, e1, e2 = 0.0, 1.0, 0.0
        else:
            e0, e1, e2 = 1.0, 0.0, 0.0
        d = e0 * U[0, 0] + e1 * U[1, 0] + e2 * U[2, 0]
        w0 = e0 - d * U[0, 0]
        w1 = e1 - d * U[1, 0]
        w2 = e2 - d * U[2, 0]
        wn = np.sqrt(w0 * w0 + w1 * w1 + w2 * w2)
        U[0, 1] = w0 / wn
        U[1, 1] = w1 / wn
        U[2, 1] = w2 / wn
    # third column from the cross product keeps det(U) = +1
    U[0, 2] = U[1, 0] * U[2, 1] - U[2, 0] * U[1, 1]
    U[1, 2] = U[2, 0] * U[0, 1] - U[0, 0] * U[2, 1]
    U[2, 2] = U[0, 0] * U[1, 1] - U[1, 0] * U[0, 1]
    s[0] = s0
    s[1] = s1
    s[2] = U[0, 2] * a2x + U[1, 2] * a2y + U[2, 2] * a2z


@njit(cache=True)
def svd3(F):
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    s = np.empty(3)
    svd3_to(F, U, s, V, np.empty((3, 3)))
    return U, s, V


_usv = usvt


# ---------------------------------------------------------------- energy / stress


@njit(cache=True)
def corotated_energy(F, mu, lam):
    U, s, V = svd3(F)
    J = s[0] * s[1] * s[2]
    e = (s[0] - 1.0) ** 2 + (s[1] - 1.0) ** 2 + (s[2] - 1.0) ** 2
    return mu * e + 0.5 * lam * (J - 1.0) ** 2


@njit(cache=True)
def kirchhoff_to(F, U, s, V, mu, lam, tau):
    """tau = 2 mu (F - R) F^T + lam (J - 1) J I with R = U V^T."""
    J = s[0] * s[1] * s[2]
    vol = lam * (J - 1.0) * J
    for i in range(3):
        d0 = F[i, 0] - (U[i, 0] * V[0, 0] + U[i, 1] * V[0, 1] + U[i, 2] * V[0, 2])
        d1 = F[i, 1] - (U[i, 0] * V[1, 0] + U[i, 1] * V[1, 1] + U[i, 2] * V[1, 2])
        d2 = F[i, 2] - (U[i, 0] * V[2, 0] + U[i, 1] * V[2, 1] + U[i, 2] * V[2, 2])
        for j in range(3):
            tau[i, j] = 2.0 * mu * (d0 * F[j, 0] + d1 * F[j, 1] + d2 * F[j, 2])
        tau[i, i] += vol


@njit(cache=True)
def kirchhoff_from_svd(F, U, s, V, mu, lam):
    tau = np.empty((3, 3))
    kirchhoff_to(F, U, s, V, mu, lam, tau)
    return tau


@njit(cache=True)
def kirchhoff(F, mu, lam):
    U, s, V = svd3(F)
    return kirchhoff_from_svd(F, U, s, V, mu, lam)


# ---------------------------------------------------------------- return map


@njit(cache=True)
def return_map_to(s, c, f):
    """Project singular values onto the von Mises surface in Hencky space.

    c is the yield strain sigma_y / (2 mu). Writes the new singular values
    to f and returns (flag, delta_gamma).
    """
    e0 = np.log(s[0])
    e1 = np.log(s[1])
    e2 = np.log(s[2])
    mean = (e0 + e1 + e2) / 3.0
    d0 = e0 - mean
    d1 = e1 - mean
    d2 = e2 - mean
    nrm = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    dg = nrm - c
    if dg <= 0.0 or nrm < 1e-12:
        f[0] = s[0]
        f[1] = s[1]
        f[2] = s[2]
        return (RM_ELASTIC if dg <= 0.0 else RM_DEGENERATE), dg
    r = dg / nrm
    f[0] = np.exp(e0 - r * d0)
    f[1] = np.exp(e1 - r * d1)
    f[2] = np.exp(e2 - r * d2)
    return RM_YIELDED, dg


@njit(cache=True)
def return_map_svd(s, c):
    """Returns the new singular values, the branch flag, delta_gamma, the
    trial Hencky strain and its deviator."""
    f = np.empty(3)
    flag, dg = return_map_to(s, c, f)
    eps = np.log(s)
    dev = eps - (eps[0] + eps[1] + eps[2]) / 3.0
    return f, flag, dg, eps, dev


# ---------------------------------------------------------------- reverse mode


@njit(cache=True)
def isotropic_vjp_to(U, V, Jf, Dm, Dp, G, out, T):
    """Pull back G through X -> U diag(f(s)) V^T into out.

    Jf[i, k] = df_i/ds_k. Dm[i, j] = (f_j - f_i)/(s_j - s_i) and
    Dp[i, j] = (f_i + f_j)/(s_i + s_j) for the off-diagonal pairs.
    Uses T[0:3] as scratch and leaves U^T G V in T[1].
    """
    mtm_to(U, G, T[0])
    B = T[1]
    mm_to(T[0], V, B)
    M = T[2]
    for k in range(3):
        M[k, k] = B[0, 0] * Jf[0, k] + B[1, 1] * Jf[1, k] + B[2, 2] * Jf[2, k]
    for i in range(3):
        for j in range(i + 1, 3):
            sym = 0.5 * (B[i, j] + B[j, i])
            skw = 0.5 * (B[i, j] - B[j, i])
            M[i, j] = Dm[i, j] * sym + Dp[i, j] * skw
            M[j, i] = Dm[i, j] * sym - Dp[i, j] * skw
    mm_to(U, M, T[0])
    mmt_to(T[0], V, out)


@njit(cache=True)
def isotropic_vjp(U, s, V, Jf, Dm, Dp, G):
    out = np.empty((3, 3))
    isotropic_vjp_to(U, V, Jf, Dm, Dp, G, out, np.empty((3, 3, 3)))
    return out


@njit(cache=True)
def rotation_vjp_to(U, s, V, G, out, T):
    """Pull back G through the polar rotation R = U V^T of F = U diag(s) V^T."""
    mtm_to(U, G, T[0])
    B = T[1]
    mm_to(T[0], V, B)
    M = T[2]
    for i in range(3):
        M[i, i] = 0.0
        for j in range(i + 1, 3):
            w = (B[i, j] - B[j, i]) / (s[i] + s[j])
            M[i, j] = w
            M[j, i] = -w
    mm_to(U, M, T[0])
    mmt_to(T[0], V, out)


@njit(cache=True)
def rotation_vjp(U, s, V, G):
    out = np.empty((3, 3))
    rotation_vjp_to(U, s, V, G, out, np.empty((3, 3, 3)))
    return out


@njit(cache=True)
def kirchhoff_vjp_to(F, U, s, V, mu, lam, G, dF, T):
    """Writes the F adjoint to dF and returns (dmu, dlam). T: (6, 3, 3) scratch."""
    J = s[0] * s[1] * s[2]
    trG = G[0, 0] + G[1, 1] + G[2, 2]
    GF = T[3]
    mm_to(G, F, GF)
    Rb = T[4]
    rotation_vjp_to(U, s, V, GF, Rb, T)
    FmR = T[5]
    for i in range(3):
        for j in range(3):
            FmR[i, j] = F[i, j] - (U[i, 0] * V[j, 0] + U[i, 1] * V[j, 1] + U[i, 2] * V[j, 2])
    c0 = s[1] * s[2]
    c1 = s[0] * s[2]
    c2 = s[0] * s[1]
    kv = lam * (2.0 * J - 1.0) * trG
    dmu = 0.0
    for i in range(3):
        for j in range(3):
            gtf = G[0, i] * FmR[0, j] + G[1, i] * FmR[1, j] + G[2, i] * FmR[2, j]
            cof = U[i, 0] * c0 * V[j, 0] + U[i, 1] * c1 * V[j, 1] + U[i, 2] * c2 * V[j, 2]
            dF[i, j] = 2.0 * mu * (GF[i, j] + gtf - Rb[i, j]) + kv * cof
            dmu += G[i, j] * (FmR[i, 0] * F[j, 0] + FmR[i, 1] * F[j, 1] + FmR[i, 2] * F[j, 2])
    return 2.0 * dmu, (J - 1.0) * J * trG


@njit(cache=True)
def kirchhoff_vjp(F, U, s, V, mu, lam, G):
    """Returns (dF, dmu, dlam) for the adjoint G of the Kirchhoff stress."""
    dF = np.empty((3, 3))
    dmu, dlam = kirchhoff_vjp_to(F, U, s, V, mu, lam, G, dF, np.empty((6, 3, 3)))
    return dF, dmu, dlam


@njit(cache=True)
def _ratio_expm1(a, L):
    # expm1(a L) / expm1(L), continuous at L = 0
    if abs(L) < 1e-7:
        return a * (1.0 + 0.5 * (a - 1.0) * L)
    return np.expm1(a * L) / np.expm1(L)


@njit(cache=True)
def return_map_vjp_to(U, s, V, f, flag, c, G, dF, T):
    """Pull back G (adjoint of F_E) through the return map into dF.

    Returns the adjoint of c. The elastic branch is the identity.
    T: (8, 3, 3) scratch.
    """
    if flag != RM_YIELDED:
        for i in range(3):
            for j in range(3):
                dF[i, j] = G[i, j]
        return 0.0
    ev = T[4, 0]
    sh = T[4, 1]
    for k in range(3):
        ev[k] = np.log(s[k])
    mean = (ev[0] + ev[1] + ev[2]) / 3.0
    nrm = 0.0
    for k in range(3):
        sh[k] = ev[k] - mean
        nrm += sh[k] * sh[k]
    nrm = np.sqrt(nrm)
    for k in range(3):
        sh[k] /= nrm
    alpha = c / nrm
    Jf = T[5]
    Dm = T[6]
    Dp = T[7]
    for i in range(3):
        for k in range(3):
            dl = 1.0 / 3.0 + alpha * ((1.0 if i == k else 0.0) - 1.0 / 3.0 - sh[i] * sh[k])
            Jf[i, k] = f[i] * dl / s[k]
    for i in range(3):
        for j in range(i + 1, 3):
            Dm[i, j] = (f[i] / s[i]) * _ratio_expm1(alpha, ev[j] - ev[i])
            Dp[i, j] = (f[i] + f[j]) / (s[i] + s[j])
    isotropic_vjp_to(U, V, Jf, Dm, Dp, G, dF, T)
    B = T[1]
    return B[0, 0] * f[0] * sh[0] + B[1, 1] * f[1] * sh[1] + B[2, 2] * f[2] * sh[2]


@njit(cache=True)
def return_map_vjp(U, s, V, f, flag, c, G):
    """Returns (dF_trial, dc)."""
    dF = np.empty((3, 3))
    dc = return_map_vjp_to(U, s, V, f, flag, c, G, dF, np.empty((8, 3, 3)))
    return dF, dc


# ---------------------------------------------------------------- python API


def _check_det(F: np.ndarray, name: str):
    if not np.linalg.det(F) > 0:
        raise DomainError(f"{name} must have positive determinant")


def polar_rotation(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    F = np.asarray(F, dtype=np.float64).reshape(3, 3)
    _check_det(F, "F")
    U, s, V = svd3(F)
    if s.min() < 1e-12:
        raise DegenerateMatrixError(f"singular value {s.min():.3e} below 1e-12")
    R = U @ V.T
    S = V @ np.diag(s) @ V.T
    return R, 0.5 * (S + S.T)


def fixed_corotated_stress(state: DeformationState, lame: LameParams) -> np.ndarray:
    _check_det(state.F_E, "F_E")
    return kirchhoff(state.F_E, lame.mu, lame.lam)


def energy_density(F: np.ndarray, lame: LameParams) -> float:
    return float(corotated_energy(np.asarray(F, dtype=np.float64), lame.mu, lame.lam))


def von_mises_return_map(state: DeformationState, sigma_y: float,
                         lame: LameParams) -> tuple[np.ndarray, PlasticProjection]:
    _check_det(state.F_trial, "F_trial")
    if not sigma_y > 0:
        raise DomainError("yield stress must be positive")
    U, s, V = svd3(state.F_trial)
    f, flag, dg, eps, dev = return_map_svd(s, sigma_y / (2.0 * lame.mu))
    proj = PlasticProjection(eps, dev, float(dg), flag == RM_YIELDED, flag == RM_DEGENERATE)
    if flag != RM_YIELDED:
        return state.F_trial.copy(), proj
    return _usv(U, f, V), proj
