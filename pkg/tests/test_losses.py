import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpmsysid import geometry as g
from mpmsysid import losses as L
from mpmsysid.errors import DomainError


def brute_chamfer(a, b):
    s = sum(min(np.linalg.norm(p - q) for q in b) for p in a)
    return s + sum(min(np.linalg.norm(p - q) for p in a) for q in b)


def brute_emd(a, b):
    best = math.inf
    for perm in itertools.permutations(range(len(b)), len(a)):
        best = min(best, sum(np.linalg.norm(a[i] - b[j]) for i, j in enumerate(perm)))
    return best


def brute_heightmap(points, origin, extent=g.HM_EXTENT, cells=g.HM_CELLS):
    out = np.zeros((cells, cells))
    seen = np.zeros((cells, cells), bool)
    cs = extent / cells
    for p in points:
        i = math.floor((p[0] - origin[0] + extent / 2) / cs)
        j = math.floor((p[1] - origin[1] + extent / 2) / cs)
        if 0 <= i < cells and 0 <= j < cells:
            out[i, j] = p[2] if not seen[i, j] else max(out[i, j], p[2])
            seen[i, j] = True
    return out


clouds = st.integers(0, 2 ** 32 - 1).map(np.random.default_rng)


# ------------------------------------------------------------------ examples


def test_identical_sets_are_zero():
    a = np.random.default_rng(0).normal(size=(30, 3))
    assert L.chamfer(a, a).value == 0.0
    assert L.emd(a, a)[0].value == 0.0


def test_single_pair():
    a, b = np.zeros((1, 3)), np.array([[3.0, 4.0, 0.0]])
    assert L.chamfer(a, b).value == 10.0
    assert L.emd(a, b)[0].value == 5.0


def test_emd_is_injective():
    a = np.zeros((2, 3))
    b = np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0]])
    assert L.chamfer(a, b).value == 6.0    # a->b 0, b->a 0 + 1 + 5
    assert L.emd(a, b)[0].value == 1.0


def test_emd_rejects_larger_source():
    with pytest.raises(DomainError):
        L.emd(np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(DomainError):
        L.chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


def test_heightmap_distance_units():
    z = np.zeros((32, 32))
    a = g.HeightMap(z.copy(), (0.0, 0.0))
    z[3, 4] = 0.002
    b = g.HeightMap(z, (0.0, 0.0))
    assert L.heightmap_distance(a, b).value == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(DomainError):
        L.heightmap_distance(a, g.HeightMap(z, (0.01, 0.0)))


# ------------------------------------------------------------------ brute-force oracles


@given(clouds, st.integers(1, 12), st.integers(1, 12))
def test_chamfer_matches_brute_force(rng, n, m):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert L.chamfer(a, b).value == pytest.approx(brute_chamfer(a, b), rel=1e-12)


@given(clouds, st.integers(1, 5), st.integers(0, 2))
def test_emd_matches_brute_force(rng, n, extra):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n + extra, 3))
    assert L.emd(a, b)[0].value == pytest.approx(brute_emd(a, b), rel=1e-12)


@settings(max_examples=10)
@given(clouds)
def test_auction_within_reported_gap(rng):
    a, b = rng.uniform(0, 0.05, (60, 3)), rng.uniform(0, 0.05, (70, 3))
    exact = L.emd(a, b)[0].value
    v, m = L.emd(a, b, exact_limit=0)
    assert not m.exact
    assert len(set(m.pairs.tolist())) == 60
    assert exact - 1e-12 <= v.value <= exact + m.gap + 1e-12
    assert m.gap <= 1e-6 * 70 + 1e-9


@given(clouds, st.integers(1, 300))
def test_heightmap_matches_brute_force(rng, n):
    pts = rng.uniform(-0.07, 0.07, (n, 3))
    pts[:, 2] = rng.uniform(0, 0.05, n)
    origin = tuple(rng.uniform(-0.01, 0.01, 2))
    assert np.array_equal(g.rasterize_heightmap(pts, origin).values,
                          brute_heightmap(pts, origin))


# ------------------------------------------------------------------ invariants


@given(clouds, st.integers(1, 15), st.integers(1, 15))
def test_chamfer_symmetric(rng, n, m):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert L.chamfer(a, b).value == pytest.approx(L.chamfer(b, a).value, rel=1e-12)


@given(clouds, st.integers(1, 15))
def test_emd_symmetric_equal_sizes(rng, n):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    assert L.emd(a, b)[0].value == pytest.approx(L.emd(b, a)[0].value, rel=1e-12)


@given(clouds, st.integers(1, 15), st.integers(0, 5))
def test_translation_invariant(rng, n, extra):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n + extra, 3))
    t = rng.normal(size=3)
    assert L.chamfer(a + t, b + t).value == pytest.approx(L.chamfer(a, b).value, rel=1e-9)
    assert L.emd(a + t, b + t)[0].value == pytest.approx(L.emd(a, b)[0].value, rel=1e-9)


@given(clouds, st.integers(1, 15), st.integers(0, 5))
def test_triangle_bounds(rng, n, extra):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n + extra, 3))
    cd, em = L.chamfer(a, b).value, L.emd(a, b)[0].value
    # the a->b chamfer half is a lower bound of EMD
    assert L.chamfer_terms(a, b)[1].sum() <= em + 1e-12
    assert cd >= 0 and em >= 0


# ------------------------------------------------------------------ gradients


def _fd(f, x, h=1e-6):
    gr = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        gr[idx] = (f(xp) - f(xm)) / (2 * h)
    return gr


@pytest.mark.parametrize("kind", L.POINT_KINDS)
@pytest.mark.parametrize("seed", range(3))
def test_point_gradient_matches_fd(kind, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(20, 3)), rng.normal(size=(24 if seed else 16, 3))
    _, grad = L.loss_and_grad(x, y, kind)
    fd = _fd(lambda z: L.loss_and_grad(z, y, kind, need_grad=False)[0].value, x)
    assert np.allclose(grad, fd, rtol=1e-5, atol=1e-6)


def test_heightmap_gradient_matches_frozen_fd():
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.04, 0.04, (20, 3))
    x[:, 2] = rng.uniform(0.0, 0.03, 20)
    tgt = g.rasterize_heightmap(rng.uniform(-0.04, 0.04, (20, 3)) * [1, 1, 0.5] + [0, 0, 0.02],
                                (0.0, 0.0))
    val, grad = L.loss_and_grad(x, tgt, L.HEIGHTMAP)
    f = L.frozen_loss(x, tgt, L.HEIGHTMAP)
    assert f(x) == pytest.approx(val.value, rel=1e-12)
    assert np.allclose(grad, _fd(f, x), rtol=1e-6, atol=1e-6)


def test_heightmap_gradient_only_top_particles():
    x = np.array([[0.0, 0.0, 0.01], [0.0001, 0.0, 0.02]])
    tgt = g.HeightMap(np.zeros((32, 32)), (0.0, 0.0))
    _, grad = L.heightmap_grad(x, tgt)
    assert np.array_equal(grad, [[0, 0, 0], [0, 0, 1000.0]])


@pytest.mark.parametrize("kind", L.POINT_KINDS)
def test_frozen_loss_agrees_at_x0(kind):
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(15, 3)), rng.normal(size=(11, 3))
    assert L.frozen_loss(x, y, kind)(x) == pytest.approx(
        L.loss_and_grad(x, y, kind, need_grad=False)[0].value, rel=1e-12)


# ------------------------------------------------------------------ observation targets


def test_pcd_and_prt_targets():
    body = g.fill_particles(g.Box((0, 0, 0.012), (0.02, 0.02, 0.012)), 4e6,
                            np.random.default_rng(7)).points
    off = g.NoiseConfig(enabled=False, bottom_cut=0.0, project_bottom=False, voxel=0.0)
    obs = g.synthesize_observation(body, off, np.random.default_rng(0))
    # every observed surface point is a particle, so only the particle side contributes
    ia, da, ib, db = L.chamfer_terms(body, obs.cloud)
    assert db.max() == 0.0 and da.max() > 0.0
    filled = g.reconstruct_filled(obs.dense.points, max_count=len(body))
    prt = L.loss_and_grad(body, filled, L.PRT_EMD, need_grad=False)[0].value
    pcd = L.loss_and_grad(body, obs.cloud, L.PCD_EMD, need_grad=False)[0].value
    # the cloud maps injectively onto the particles it came from
    assert pcd == 0.0 and prt > 0.0


def test_heightmap_kind_needs_heightmap():
    with pytest.raises(DomainError):
        L.loss_and_grad(np.zeros((3, 3)), np.zeros((3, 3)), L.HEIGHTMAP)
    with pytest.raises(DomainError):
        L.loss_and_grad(np.zeros((3, 3)), np.zeros((3, 3)), "L2")
