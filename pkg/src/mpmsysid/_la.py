"""Explicit 3x3 helpers; numba's matmul goes through BLAS, which is slow at this size."""
import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def mm(A, B):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
    return out


@njit(cache=True, inline="always")
def mmt(A, B):
    """A @ B.T"""
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[j, 0] + A[i, 1] * B[j, 1] + A[i, 2] * B[j, 2]
    return out


@njit(cache=True, inline="always")
def mtm(A, B):
    """A.T @ B"""
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[0, i] * B[0, j] + A[1, i] * B[1, j] + A[2, i] * B[2, j]
    return out


@njit(cache=True, inline="always")
def mv(A, x):
    out = np.empty(3)
    for i in range(3):
        out[i] = A[i, 0] * x[0] + A[i, 1] * x[1] + A[i, 2] * x[2]
    return out


@njit(cache=True, inline="always")
def mtv(A, x):
    out = np.empty(3)
    for i in range(3):
        out[i] = A[0, i] * x[0] + A[1, i] * x[1] + A[2, i] * x[2]
    return out


@njit(cache=True, inline="always")
def det3(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@njit(cache=True, inline="always")
def usvt(U, s, V):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = U[i, 0] * s[0] * V[j, 0] + U[i, 1] * s[1] * V[j, 1] + U[i, 2] * s[2] * V[j, 2]
    return out


@njit(cache=True, inline="always")
def mm_to(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True, inline="always")
def mmt_to(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[j, 0] + A[i, 1] * B[j, 1] + A[i, 2] * B[j, 2]


@njit(cache=True, inline="always")
def mtm_to(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[0, i] * B[0, j] + A[1, i] * B[1, j] + A[2, i] * B[2, j]


@njit(cache=True, inline="always")
def usvt_to(U, s, V, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = U[i, 0] * s[0] * V[j, 0] + U[i, 1] * s[1] * V[j, 1] + U[i, 2] * s[2] * V[j, 2]
