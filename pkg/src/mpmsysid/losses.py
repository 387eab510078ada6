"""Point-set distances between simulated particles and observations.

Chamfer and EMD are unaveraged sums of Euclidean distances. Gradients
hold the nearest-neighbour / assignment structure fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment

from .errors import DomainError
from .geometry import HeightMap, PointSet, heightmap_argmax, rasterize_heightmap

PCD_CD = "PCD-CD"
PRT_CD = "PRT-CD"
PCD_EMD = "PCD-EMD"
PRT_EMD = "PRT-EMD"
HEIGHTMAP = "HEIGHTMAP"
LOSS_KINDS = (PCD_CD, PRT_CD, PCD_EMD, PRT_EMD, HEIGHTMAP)
POINT_KINDS = LOSS_KINDS[:4]

EXACT_EMD_LIMIT = 512


@dataclass(frozen=True)
class LossValue:
    value: float
    kind: str

    def __float__(self):
        return self.value


@dataclass
class Matching:
    pairs: np.ndarray     # pairs[i] = index in the target of source point i
    cost: float
    exact: bool = True
    gap: float = 0.0      # upper bound on cost - optimum


def _pts(x) -> np.ndarray:
    if isinstance(x, PointSet):
        return x.points
    p = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise DomainError("point set is empty")
    return p


def pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d0 = a[:, None, 0] - b[None, :, 0]
    d1 = a[:, None, 1] - b[None, :, 1]
    d2 = a[:, None, 2] - b[None, :, 2]
    return np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)


def _nearest(a: np.ndarray, b: np.ndarray, chunk: int = 2048):
    """For each point of a: index of and distance to its nearest point in b.

    Ties go to the lowest index.
    """
    idx = np.empty(len(a), dtype=np.int64)
    dist = np.empty(len(a))
    for s in range(0, len(a), chunk):
        D = pairwise(a[s:s + chunk], b)
        k = np.argmin(D, axis=1)
        idx[s:s + chunk] = k
        dist[s:s + chunk] = D[np.arange(len(k)), k]
    return idx, dist


# ------------------------------------------------------------------ chamfer


def chamfer_terms(a, b):
    a, b = _pts(a), _pts(b)
    ia, da = _nearest(a, b)
    ib, db = _nearest(b, a)
    return ia, da, ib, db


def chamfer(a, b) -> LossValue:
    _, da, _, db = chamfer_terms(a, b)
    return LossValue(math.fsum(da) + math.fsum(db), "CD")


def chamfer_grad(a, b):
    """Value and gradient with respect to the points of a."""
    a, b = _pts(a), _pts(b)
    ia, da, ib, db = chamfer_terms(a, b)
    g = np.zeros_like(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = (a - b[ia]) / da[:, None]
        w = (a[ib] - b) / db[:, None]
    u[da == 0] = 0.0
    w[db == 0] = 0.0
    g += u
    np.add.at(g, ib, w)
    return math.fsum(da) + math.fsum(db), g


# ------------------------------------------------------------------ EMD


@njit(cache=True)
def _auction(a, b, eps_final):
    """Forward auction with eps scaling. Sources past len(a) are zero-cost
    dummies that pad the problem to square, so no target keeps a stale
    price from an earlier phase."""
    n = a.shape[0]
    m = b.shape[0]
    price = np.zeros(m)
    owner = np.full(m, -1, dtype=np.int64)
    assign = np.full(m, -1, dtype=np.int64)
    stack = np.empty(m, dtype=np.int64)
    span = 0.0
    for k in range(3):
        lo = min(a[:, k].min(), b[:, k].min())
        hi = max(a[:, k].max(), b[:, k].max())
        span += (hi - lo) ** 2
    eps = max(np.sqrt(span) / 4.0, eps_final)
    while True:
        for i in range(m):
            assign[i] = -1
            stack[i] = m - 1 - i
        for j in range(m):
            owner[j] = -1
        top = m
        while top > 0:
            top -= 1
            i = stack[top]
            best = -np.inf
            second = -np.inf
            jb = -1
            for j in range(m):
                if i < n:
                    d0 = a[i, 0] - b[j, 0]
                    d1 = a[i, 1] - b[j, 1]
                    d2 = a[i, 2] - b[j, 2]
                    val = -np.sqrt(d0 * d0 + d1 * d1 + d2 * d2) - price[j]
                else:
                    val = -price[j]
                if val > best:
                    second = best
                    best = val
                    jb = j
                elif val > second:
                    second = val
            if m == 1:
                second = best
            price[jb] += best - second + eps
            prev = owner[jb]
            if prev >= 0:
                assign[prev] = -1
                stack[top] = prev
                top += 1
            owner[jb] = i
            assign[i] = jb
        if eps <= eps_final:
            break
        eps = max(eps / 5.0, eps_final)
    return assign[:n].copy(), price


def _dual_bound(a, b, price) -> float:
    """Lower bound on the optimum from object prices (any prices work for
    the square problem padded with zero-cost sources)."""
    lb = 0.0
    for s in range(0, len(a), 1024):
        D = pairwise(a[s:s + 1024], b) + price[None, :]
        lb += math.fsum(D.min(axis=1))
    lb += (len(b) - len(a)) * float(price.min())
    return lb - math.fsum(price)


def emd(a, b, exact_limit: int = EXACT_EMD_LIMIT, eps: float = 1e-6):
    """Minimal total distance of an injective map from a into b.

    Exact (linear assignment) up to `exact_limit` source points; beyond
    that an auction solver whose optimality gap is bounded through its
    dual prices.
    """
    a, b = _pts(a), _pts(b)
    if len(a) > len(b):
        raise DomainError(f"EMD needs |a| <= |b|, got {len(a)} > {len(b)}")
    if len(a) <= exact_limit:
        D = pairwise(a, b)
        r, c = linear_sum_assignment(D)
        pairs = np.empty(len(a), dtype=np.int64)
        pairs[r] = c
        cost = math.fsum(D[r, c])
        return LossValue(cost, "EMD"), Matching(pairs, cost)
    pairs, price = _auction(a, b, eps)
    d = b[pairs] - a
    cost = math.fsum(np.sqrt((d * d).sum(axis=1)))
    gap = max(cost - _dual_bound(a, b, price), 0.0)
    return LossValue(cost, "EMD"), Matching(pairs, cost, False, gap)


def emd_grad(sim, target, **kw):
    """EMD between the sim points and a target; gradient w.r.t. sim points.

    The smaller set is the source of the injective map.
    """
    x, y = _pts(sim), _pts(target)
    g = np.zeros_like(x)
    if len(x) <= len(y):
        _, m = emd(x, y, **kw)
        d = x - y[m.pairs]
        r = np.sqrt((d * d).sum(axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            u = d / r[:, None]
        u[r == 0] = 0.0
        g += u
    else:
        _, m = emd(y, x, **kw)
        d = x[m.pairs] - y
        r = np.sqrt((d * d).sum(axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            u = d / r[:, None]
        u[r == 0] = 0.0
        g[m.pairs] += u
    return m.cost, g, m


# ------------------------------------------------------------------ heightmaps


def heightmap_distance(a: HeightMap, b: HeightMap) -> LossValue:
    """Summed absolute cell difference, in mm."""
    if a.spec() != b.spec():
        raise DomainError(f"heightmap specs differ: {a.spec()} vs {b.spec()}")
    diff = np.abs(a.values - b.values) * 1000.0
    return LossValue(math.fsum(diff.ravel()), HEIGHTMAP)


def heightmap_grad(sim, target: HeightMap):
    """Heightmap distance of the sim points and its gradient (z of the top particle per cell)."""
    x = _pts(sim)
    hm = rasterize_heightmap(x, target.origin, target.extent, target.cells)
    val = heightmap_distance(hm, target).value
    top = heightmap_argmax(x, target.origin, target.extent, target.cells)
    g = np.zeros_like(x)
    s = np.sign(hm.values - target.values) * 1000.0
    ok = top >= 0
    np.add.at(g[:, 2], top[ok], s[ok])
    return val, g


# ------------------------------------------------------------------ dispatch


def loss_and_grad(sim, target, kind: str, need_grad: bool = True, **kw):
    """Loss of sim particle positions against the observation target for `kind`.

    PCD kinds take the surface cloud, PRT kinds the filled particle set and
    HEIGHTMAP a HeightMap. Returns (LossValue, gradient or None).
    """
    if kind not in LOSS_KINDS:
        raise DomainError(f"unknown loss kind {kind!r}")
    x = sim.positions if hasattr(sim, "positions") else _pts(sim)
    if kind == HEIGHTMAP:
        if not isinstance(target, HeightMap):
            raise DomainError("the heightmap loss needs a HeightMap target")
        val, g = heightmap_grad(x, target)
    elif kind.endswith("CD"):
        val, g = chamfer_grad(x, target)
    else:
        val, g, _ = emd_grad(x, target, **kw)
    return LossValue(val, kind), (g if need_grad else None)


def loss_with_observation_target(sim, target, kind: str, **kw) -> LossValue:
    return loss_and_grad(sim, target, kind, need_grad=False, **kw)[0]


# ------------------------------------------------------------------ frozen structure


def frozen_loss(x0, target, kind: str, **kw):
    """Loss as a function of sim positions with the nearest-neighbour or
    assignment structure fixed at x0 (the function the gradients
    differentiate). Heightmap cells keep their top particle."""
    x0 = _pts(x0)
    if kind == HEIGHTMAP:
        top = heightmap_argmax(x0, target.origin, target.extent, target.cells)
        ok = top >= 0
        tv = target.values

        def f(x):
            z = np.zeros_like(tv)
            z[ok] = _pts(x)[top[ok], 2]
            return math.fsum((np.abs(z - tv) * 1000.0).ravel())
        return f
    y = _pts(target)
    if kind.endswith("CD"):
        ia, _, ib, _ = chamfer_terms(x0, y)

        def f(x):
            x = _pts(x)
            da = np.sqrt(((x - y[ia]) ** 2).sum(axis=1))
            db = np.sqrt(((x[ib] - y) ** 2).sum(axis=1))
            return math.fsum(da) + math.fsum(db)
        return f
    if kind.endswith("EMD"):
        if len(x0) <= len(y):
            pairs = emd(x0, y, **kw)[1].pairs

            def f(x):
                return math.fsum(np.sqrt(((_pts(x) - y[pairs]) ** 2).sum(axis=1)))
        else:
            pairs = emd(y, x0, **kw)[1].pairs

            def f(x):
                return math.fsum(np.sqrt(((_pts(x)[pairs] - y) ** 2).sum(axis=1)))
        return f
    raise DomainError(f"unknown loss kind {kind!r}")
