"""Shapes, particle filling, trajectories, heightmaps and synthetic observations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation, Slerp

from .errors import DomainError

DEFAULT_DENSITY = 4e6  # particles per m^3

# ------------------------------------------------------------------ point sets

SURFACE = "surface"
FILLED = "filled"


@dataclass
class PointSet:
    points: np.ndarray
    kind: str = FILLED

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("a point set needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point set contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


# ------------------------------------------------------------------ solids


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple

    def inside(self, p):
        return np.all(np.abs(p - np.asarray(self.center)) <= np.asarray(self.half), axis=1)

    def bounds(self):
        c, h = np.asarray(self.center), np.asarray(self.half)
        return c - h, c + h

    @property
    def volume(self):
        return 8.0 * float(np.prod(self.half))

    @property
    def centroid(self):
        return np.asarray(self.center, dtype=float)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def inside(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=1) <= self.radius

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    @property
    def volume(self):
        return 4.0 / 3.0 * math.pi * self.radius ** 3

    @property
    def centroid(self):
        return np.asarray(self.center, dtype=float)


@dataclass(frozen=True)
class Cylinder:
    """Upright cylinder with its base at center[2]."""
    center: tuple
    radius: float
    height: float

    def inside(self, p):
        c = np.asarray(self.center)
        r = np.hypot(p[:, 0] - c[0], p[:, 1] - c[1])
        return (r <= self.radius) & (p[:, 2] >= c[2]) & (p[:, 2] <= c[2] + self.height)

    def bounds(self):
        c = np.asarray(self.center)
        return (c - [self.radius, self.radius, 0.0],
                c + [self.radius, self.radius, self.height])

    @property
    def volume(self):
        return math.pi * self.radius ** 2 * self.height

    @property
    def centroid(self):
        return np.asarray(self.center, dtype=float) + [0.0, 0.0, 0.5 * self.height]


@dataclass(frozen=True)
class Capsule:
    """Upright capsule; segment from center - (0,0,half_length) to + ."""
    center: tuple
    radius: float
    half_length: float

    def inside(self, p):
        q = p - np.asarray(self.center)
        t = np.clip(q[:, 2], -self.half_length, self.half_length)
        q = q.copy()
        q[:, 2] -= t
        return np.linalg.norm(q, axis=1) <= self.radius

    def bounds(self):
        c = np.asarray(self.center)
        e = np.array([self.radius, self.radius, self.radius + self.half_length])
        return c - e, c + e

    @property
    def volume(self):
        return math.pi * self.radius ** 2 * (4.0 / 3.0 * self.radius + 2.0 * self.half_length)

    @property
    def centroid(self):
        return np.asarray(self.center, dtype=float)


@dataclass
class TriMesh:
    """Closed triangle mesh; inside test by generalized winding number."""
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        edges = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                        self.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts != 2):
            raise DomainError("mesh is not closed: some edges are not shared by exactly two faces")

    def winding(self, p):
        a = self.vertices[self.faces[:, 0]][None] - p[:, None]
        b = self.vertices[self.faces[:, 1]][None] - p[:, None]
        c = self.vertices[self.faces[:, 2]][None] - p[:, None]
        la, lb, lc = (np.linalg.norm(u, axis=2) for u in (a, b, c))
        det = np.einsum("ijk,ijk->ij", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ijk,ijk->ij", a, b) * lc
               + np.einsum("ijk,ijk->ij", b, c) * la + np.einsum("ijk,ijk->ij", c, a) * lb)
        return np.sum(2.0 * np.arctan2(det, den), axis=1) / (4.0 * math.pi)

    def inside(self, p):
        out = np.zeros(len(p), dtype=bool)
        for s in range(0, len(p), 2048):
            out[s:s + 2048] = np.abs(self.winding(p[s:s + 2048])) > 0.5
        return out

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def box_mesh(center, half) -> TriMesh:
    c, h = np.asarray(center, dtype=float), np.asarray(half, dtype=float)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriMesh(c + v * h, f)


@dataclass
class VoxelSolid:
    """Union of occupied voxels of size `size` anchored at `origin`."""
    occupancy: np.ndarray
    origin: np.ndarray
    size: float

    def inside(self, p):
        idx = np.floor((p - self.origin) / self.size).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(self.occupancy.shape)), axis=1)
        out = np.zeros(len(p), dtype=bool)
        i = idx[ok]
        out[ok] = self.occupancy[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def bounds(self):
        occ = np.argwhere(self.occupancy)
        return (self.origin + occ.min(axis=0) * self.size,
                self.origin + (occ.max(axis=0) + 1) * self.size)

    @property
    def volume(self):
        return float(self.occupancy.sum()) * self.size ** 3


def fill_particles(shape, density: float = DEFAULT_DENSITY,
                   rng: np.random.Generator | None = None) -> PointSet:
    """Stratified jittered-lattice fill: one uniform sample per lattice cell,
    kept when inside the shape, so the expected count is density * volume."""
    if not density > 0:
        raise DomainError("density must be positive")
    if isinstance(shape, PointSet):
        raise DomainError("a bare point set is not a closed surface; pass a mesh or solid")
    rng = rng if rng is not None else np.random.default_rng(0)
    s = density ** (-1.0 / 3.0)
    lo, hi = (np.asarray(b, dtype=float) for b in shape.bounds())
    n = np.maximum(np.ceil((hi - lo) / s).astype(int), 1)
    grid = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), -1).reshape(-1, 3)
    pts = lo + (grid + rng.random(grid.shape)) * s
    pts = pts[shape.inside(pts)]
    return PointSet(pts, FILLED)


def reconstruct_filled(points: np.ndarray, max_count: int, density: float = DEFAULT_DENSITY,
                       voxel: float | None = None, rng: np.random.Generator | None = None,
                       shrink: float = 0.95) -> PointSet:
    """Filled particle set from an observed body: voxelize, close, fill.

    The density is lowered until the result has at most `max_count` points.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    voxel = voxel or density ** (-1.0 / 3.0)
    origin = points.min(axis=0) - 2 * voxel
    idx = np.floor((points - origin) / voxel).astype(np.int64)
    occ = np.zeros(idx.max(axis=0) + 3, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    occ = ndimage.binary_closing(occ, iterations=1)
    occ = ndimage.binary_fill_holes(occ)
    solid = VoxelSolid(occ, origin, voxel)
    d = density
    while True:
        out = fill_particles(solid, d, np.random.default_rng(rng.integers(2 ** 63)))
        if len(out) <= max_count:
            return out
        d *= shrink


# ------------------------------------------------------------------ trajectories

REAL = "real"
SIM = "sim"


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray  # quaternions, scalar last
    form: str = REAL
    dt: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.orientations is None:
            self.orientations = np.tile([0.0, 0.0, 0.0, 1.0], (len(self.times), 1))
        self.orientations = np.asarray(self.orientations, dtype=np.float64).reshape(-1, 4)
        if not (len(self.times) == len(self.positions) == len(self.orientations)):
            raise ValueError("trajectory arrays have different lengths")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) else 0.0

    @classmethod
    def empty(cls, dt: float = 0.01) -> "Trajectory":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), SIM, dt)

    def shifted(self, offset) -> "Trajectory":
        return Trajectory(self.times.copy(), self.positions + np.asarray(offset),
                          self.orientations.copy(), self.form, self.dt)


def resample_trajectory(real: Trajectory, frame_dt: float = 0.01) -> Trajectory:
    """Constant-dt form of a trajectory.

    Every interval between consecutive waypoints becomes
    max(1, round(duration / frame_dt)) frames at constant velocity, so each
    waypoint is reproduced exactly and each interval keeps its duration to
    within half a frame. The start pose is the first sim waypoint.
    """
    if len(real) == 0:
        return Trajectory.empty(frame_dt)
    d = np.diff(real.times)
    if np.any(d <= 0):
        raise ValueError("zero-duration trajectory segment")
    rots = Rotation.from_quat(real.orientations)
    pos = [real.positions[0]]
    quats = [real.orientations[0]]
    for i, di in enumerate(d):
        k = max(1, int(math.floor(di / frame_dt + 0.5)))
        frac = np.arange(1, k + 1) / k
        seg = real.positions[i] + np.outer(frac, real.positions[i + 1] - real.positions[i])
        seg[-1] = real.positions[i + 1]
        pos.extend(seg)
        slerp = Slerp([0.0, 1.0], rots[[i, i + 1]])
        q = slerp(frac).as_quat()
        q[-1] = real.orientations[i + 1]
        quats.extend(q)
    n = len(pos)
    return Trajectory(real.times[0] + frame_dt * np.arange(n), np.array(pos), np.array(quats),
                      SIM, frame_dt)


def discretize_motion(start, segments, durations, step: float = 0.002,
                      angle_step: float = math.radians(5.0), jitter: float = 0.0,
                      rng: np.random.Generator | None = None) -> Trajectory:
    """Real-form trajectory from relative motion segments.

    Each segment is ("x"|"y"|"z", signed distance) or ("rz", signed angle in
    radians) and is split into waypoints `step` metres or `angle_step`
    radians apart, like a motion planner would. Waypoint times spread the
    segment duration evenly, optionally jittered to make the intervals
    uneven while keeping every segment's end time fixed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    p = np.asarray(start, dtype=np.float64).copy()
    rot = Rotation.identity()
    times, pos, quats = [0.0], [p.copy()], [rot.as_quat()]
    t = 0.0
    for (axis, amount), dur in zip(segments, durations):
        if axis == "rz":
            n = max(1, int(math.ceil(abs(amount) / angle_step - 1e-9)))
        else:
            n = max(1, int(math.ceil(abs(amount) / step - 1e-9)))
        cuts = np.arange(1, n + 1) / n
        if jitter > 0 and n > 1:
            inner = cuts[:-1] + rng.uniform(-jitter, jitter, n - 1) / n
            cuts = np.concatenate([np.sort(np.clip(inner, 1e-3, 1 - 1e-3)), [1.0]])
        for m in range(1, n + 1):
            if axis == "rz":
                r = Rotation.from_euler("z", amount * m / n) * rot
                q = r.as_quat()
                pp = p.copy()
            else:
                pp = p.copy()
                pp["xyz".index(axis)] += amount * m / n
                q = rot.as_quat()
            times.append(t + dur * cuts[m - 1])
            pos.append(pp)
            quats.append(q)
        t += dur
        if axis == "rz":
            rot = Rotation.from_euler("z", amount) * rot
        else:
            p["xyz".index(axis)] += amount
    return Trajectory(np.array(times), np.array(pos), np.array(quats), REAL)


# ------------------------------------------------------------------ heightmaps

HM_CELLS = 32
HM_EXTENT = 0.11


@dataclass
class HeightMap:
    values: np.ndarray
    origin: tuple
    extent: float = HM_EXTENT

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("heightmap has non-finite cells")

    @property
    def cells(self) -> int:
        return self.values.shape[0]

    def spec(self):
        return (self.values.shape, tuple(np.round(self.origin, 12)), round(self.extent, 12))


def heightmap_cells(points: np.ndarray, origin, extent: float = HM_EXTENT,
                    cells: int = HM_CELLS) -> tuple[np.ndarray, np.ndarray]:
    """Cell indices of each point and a mask of points inside the extent."""
    cs = extent / cells
    lo = np.asarray(origin[:2], dtype=np.float64) - 0.5 * extent
    idx = np.floor((points[:, :2] - lo) / cs).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < cells), axis=1)
    return idx, ok


def rasterize_heightmap(points, origin, extent: float = HM_EXTENT,
                        cells: int = HM_CELLS) -> HeightMap:
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=float)
    idx, ok = heightmap_cells(pts, origin, extent, cells)
    vals = np.full(cells * cells, -np.inf)
    flat = idx[ok, 0] * cells + idx[ok, 1]
    np.maximum.at(vals, flat, pts[ok, 2])
    vals[~np.isfinite(vals)] = 0.0
    return HeightMap(vals.reshape(cells, cells), tuple(origin[:2]), extent)


def heightmap_argmax(points: np.ndarray, origin, extent: float = HM_EXTENT,
                     cells: int = HM_CELLS) -> np.ndarray:
    """Index of the highest point per cell (-1 for empty cells); ties -> lowest index."""
    idx, ok = heightmap_cells(points, origin, extent, cells)
    best = np.full(cells * cells, -1, dtype=np.int64)
    flat = idx[:, 0] * cells + idx[:, 1]
    for p in np.nonzero(ok)[0]:
        c = flat[p]
        if best[c] < 0 or points[p, 2] > points[best[c], 2]:
            best[c] = p
    return best.reshape(cells, cells)


# ------------------------------------------------------------------ observations


@dataclass
class NoiseConfig:
    sigma: float = 0.001
    offset: float = 0.003
    bottom_cut: float = 0.003
    project_bottom: bool = True
    voxel: float = 0.005
    table_height: float = 0.0
    enabled: bool = True
    fixed_offset: tuple | None = None   # used instead of a random offset when set


def surface_particles(points: np.ndarray, cell: float) -> np.ndarray:
    """Indices of particles in occupied voxels that touch an empty voxel."""
    origin = points.min(axis=0) - 2 * cell
    idx = np.floor((points - origin) / cell).astype(np.int64)
    occ = np.zeros(idx.max(axis=0) + 3, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    filled = ndimage.binary_fill_holes(occ)
    interior = ndimage.binary_erosion(filled, structure=ndimage.generate_binary_structure(3, 1))
    return np.nonzero(~interior[idx[:, 0], idx[:, 1], idx[:, 2]])[0]


def radius_downsample(points: np.ndarray, radius: float) -> np.ndarray:
    """Greedy thinning in voxel order; no two kept points closer than radius."""
    if len(points) == 0:
        return points
    key = np.floor(points / radius).astype(np.int64)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], key[:, 2], key[:, 1], key[:, 0]))
    kept: dict = {}
    out = []
    r2 = radius * radius
    for i in order:
        p = points[i]
        k = key[i]
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for q in kept.get((k[0] + dx, k[1] + dy, k[2] + dz), ()):
                        if (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2 < r2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            kept.setdefault((k[0], k[1], k[2]), []).append(p)
            out.append(p)
    return np.array(out)


@dataclass
class Observation:
    cloud: PointSet          # downsampled surface cloud
    dense: PointSet          # cloud before downsampling (used for heightmaps)
    offset: np.ndarray


def synthesize_observation(positions: np.ndarray, noise: NoiseConfig,
                           rng: np.random.Generator, cell: float | None = None) -> Observation:
    """Camera-like surface cloud of a particle body."""
    pts = np.asarray(positions, dtype=np.float64)
    cell = cell or DEFAULT_DENSITY ** (-1.0 / 3.0) * 1.5
    surf = pts[surface_particles(pts, cell)]
    off = np.zeros(3)
    if noise.enabled:
        surf = surf + rng.normal(0.0, noise.sigma, surf.shape)
        if noise.fixed_offset is not None:
            off = np.asarray(noise.fixed_offset, dtype=np.float64).reshape(3)
        else:
            off = rng.uniform(-noise.offset, noise.offset, 3)
        surf = surf + off
    if noise.bottom_cut > 0:
        keep = surf[:, 2] >= noise.table_height + noise.bottom_cut
        if np.any(keep):
            surf = surf[keep]
    if noise.project_bottom:
        base = surf.copy()
        base[:, 2] = noise.table_height
        surf = np.concatenate([surf, base])
    dense = surf
    cloud = radius_downsample(dense, noise.voxel) if noise.voxel > 0 else dense
    return Observation(PointSet(cloud, SURFACE), PointSet(dense, SURFACE), off)
