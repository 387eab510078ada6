"""Forward MLS-MPM stepping with rigid SDF effectors and a frictional table."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels as K
from .constitutive import LameParams, lame_from_moduli
from .errors import DomainError, InstabilityError, OutOfDomainError, SimulationError
from .sdf import BOX, CAPSULE, CYLINDER, PLANE, ROW, sdf_world

PARAM_NAMES = ("E", "nu", "rho", "sigma_y", "eta_t", "eta_m")
PARAM_BOX = {
    "E": (1e7, 3e8),
    "nu": (0.01, 0.48),
    "rho": (1000.0, 2000.0),
    "sigma_y": (1e6, 2e7),
    "eta_t": (0.01, 2.0),
    "eta_m": (0.01, 2.0),
}


@dataclass(frozen=True)
class PhysicsParams:
    E: float
    nu: float
    rho: float
    sigma_y: float
    eta_t: float
    eta_m: float

    @property
    def lame(self) -> LameParams:
        return lame_from_moduli(self.E, self.nu)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "PhysicsParams":
        return cls(*[float(x) for x in a])

    def in_box(self) -> bool:
        return all(PARAM_BOX[k][0] <= getattr(self, k) <= PARAM_BOX[k][1] for k in PARAM_NAMES)

    def validate(self):
        for k in PARAM_NAMES:
            lo, hi = PARAM_BOX[k]
            val = getattr(self, k)
            if not (lo <= val <= hi):
                raise DomainError(f"{k}={val!r} outside its box [{lo}, {hi}]")

    def clamp(self) -> "PhysicsParams":
        return PhysicsParams(*[min(max(getattr(self, k), PARAM_BOX[k][0]), PARAM_BOX[k][1])
                               for k in PARAM_NAMES])

    @classmethod
    def random(cls, rng: np.random.Generator) -> "PhysicsParams":
        return cls(*[float(rng.uniform(*PARAM_BOX[k])) for k in PARAM_NAMES])


# warm start used when nothing better is known
HAND_PICKED = PhysicsParams(E=3e7, nu=0.4, rho=1330.0, sigma_y=1e6, eta_t=0.7, eta_m=0.7)


@dataclass
class ParticleSystem:
    positions: np.ndarray
    velocities: np.ndarray
    affine: np.ndarray
    F_E: np.ndarray
    volume_per_particle: float
    rho: float = 1000.0

    @classmethod
    def at_rest(cls, positions, volume_per_particle: float, rho: float = 1000.0):
        x = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(x)
        if n < 1:
            raise ValueError("a particle system needs at least one particle")
        return cls(x.copy(), np.zeros((n, 3)), np.zeros((n, 3, 3)),
                   np.tile(np.eye(3), (n, 1, 1)), float(volume_per_particle), float(rho))

    def __len__(self):
        return len(self.positions)

    @property
    def mass_per_particle(self) -> float:
        return self.rho * self.volume_per_particle

    @property
    def total_mass(self) -> float:
        return len(self) * self.mass_per_particle

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(self.positions.copy(), self.velocities.copy(), self.affine.copy(),
                              self.F_E.copy(), self.volume_per_particle, self.rho)

    def with_density(self, rho: float) -> "ParticleSystem":
        out = self.copy()
        out.rho = float(rho)
        return out


# ------------------------------------------------------------------ effectors


SHAPES = {"box": BOX, "cylinder": CYLINDER, "capsule": CAPSULE, "plane": PLANE}


@dataclass
class RigidEffector:
    """Kinematic rigid body. The body origin is the effector tip."""
    shape: str
    dims: tuple
    center: tuple = (0.0, 0.0, 0.0)
    axis: int = 2
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    friction_slot: int = 1

    def row(self) -> np.ndarray:
        r = np.zeros(ROW)
        r[0] = SHAPES[self.shape]
        r[1] = self.friction_slot
        r[2:5] = self.position
        r[5:14] = Rotation.from_quat(self.orientation).as_matrix().ravel()
        r[14:17] = self.velocity
        r[17:20] = self.angular_velocity
        r[20:23] = self.center
        r[23] = self.axis
        r[24:24 + len(self.dims)] = self.dims
        return r

    def posed(self, position, orientation=None) -> "RigidEffector":
        return replace(self, position=np.asarray(position, dtype=np.float64),
                       orientation=self.orientation if orientation is None
                       else np.asarray(orientation, dtype=np.float64))

    def sdf(self, point) -> tuple[float, np.ndarray]:
        d, n, _ = sdf_world(self.row(), np.asarray(point, dtype=np.float64))
        return float(d), n


def table(height: float = 0.0) -> RigidEffector:
    return RigidEffector("plane", (), position=np.array([0.0, 0.0, height]), friction_slot=0)


def make_effector(kind: str) -> RigidEffector:
    """The three effectors used in the experiments, tip at the body origin."""
    if kind == "rectangle":
        return RigidEffector("box", (0.01, 0.02, 0.05), center=(0.0, 0.0, 0.05))
    if kind == "cylinder":
        # horizontal roller along y
        return RigidEffector("cylinder", (0.01, 0.04), center=(0.0, 0.0, 0.01), axis=1)
    if kind == "round":
        return RigidEffector("capsule", (0.01, 0.04), center=(0.0, 0.0, 0.05), axis=2)
    raise ValueError(f"unknown effector kind {kind!r}")


EFFECTOR_KINDS = ("rectangle", "cylinder", "round")


@dataclass
class ContactQuery:
    v: np.ndarray
    v_obj: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        self.v_obj = np.asarray(self.v_obj, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-10:
            raise DomainError("contact normal must be a unit vector")

    @property
    def v_rel(self):
        return self.v - self.v_obj

    @property
    def v_n(self) -> float:
        return float(self.v_rel @ self.normal)

    @property
    def v_t(self):
        return self.v_rel - self.normal * self.v_n


def resolve_friction(q: ContactQuery, eta: float) -> np.ndarray:
    out, _ = K.friction(q.v, q.v_obj, q.normal, float(eta))
    return out


# ------------------------------------------------------------------ scene


@dataclass
class SceneConfig:
    """Simulation domain and stepping controls (SI units)."""
    domain_lo: tuple = (-0.25, -0.25, -0.0234375)
    resolution: tuple = (64, 64, 64)
    dx: float = 0.5 / 64
    frame_dt: float = 0.01
    n_substeps: int = 100
    cfl: float = 0.5
    gravity: tuple = (0.0, 0.0, -9.81)
    table_height: float = 0.0
    bound: int = 3
    plasticity: bool = True

    @classmethod
    def around(cls, center, size: float = 0.5, n: int = 64, bound: int = 3, **kw) -> "SceneConfig":
        """Cubic domain of n^3 nodes centred on `center` in x-y.

        The table plane lands exactly on a node layer `bound` cells above the
        bottom face.
        """
        dx = size / n
        lo = (center[0] - 0.5 * size, center[1] - 0.5 * size, -bound * dx)
        return cls(domain_lo=lo, resolution=(n, n, n), dx=dx, bound=bound, **kw)

    def substeps_for(self, params: PhysicsParams) -> int:
        """Substeps per frame: the default, raised to satisfy c*dt < cfl*dx.

        c is the P-wave speed sqrt((lam + 2 mu) / rho), which bounds
        sqrt(E / rho) from above and keeps nearly incompressible bodies stable.
        """
        lame = params.lame
        c = math.sqrt((lame.lam + 2.0 * lame.mu) / params.rho)
        need = math.ceil(self.frame_dt * c / (self.cfl * self.dx) * (1.0 + 1e-12))
        return max(int(self.n_substeps), int(need))

    @property
    def domain_hi(self):
        return tuple(self.domain_lo[a] + (self.resolution[a] - 1) * self.dx for a in range(3))


@dataclass
class EulerianGrid:
    resolution: tuple
    dx: float
    lo: np.ndarray
    mass: np.ndarray
    momentum: np.ndarray
    velocity: np.ndarray

    @classmethod
    def empty(cls, scene: SceneConfig) -> "EulerianGrid":
        r = tuple(scene.resolution)
        return cls(r, scene.dx, np.asarray(scene.domain_lo, dtype=np.float64), np.zeros(r),
                   np.zeros(r + (3,)), np.zeros(r + (3,)))


class Workspace:
    """Preallocated buffers for one particle count, scene and collider count."""

    def __init__(self, n: int, scene: SceneConfig, ncol: int):
        r = tuple(scene.resolution)
        self.n, self.ncol = n, ncol
        self.grid = (np.zeros(r), np.zeros(r + (3,)), np.zeros(r + (3,)), np.zeros(r + (3,)),
                     np.zeros(r + (ncol, 3)), np.zeros(r + (ncol,), dtype=np.int8))
        self.ws = (np.zeros((n, 3), dtype=np.int64), np.zeros((n, 3)), np.zeros((n, 3, 3)),
                   np.zeros((n, 3, 3)), np.zeros((n, 3, 3)), np.zeros((n, 3)),
                   np.zeros((n, 3, 3)), np.zeros((n, 3)), np.zeros(n, dtype=np.int64),
                   np.zeros((n, 3, 3)), np.zeros((n, 3)), np.zeros((n, ncol, 3)),
                   np.zeros((n, ncol), dtype=np.int8), np.zeros(6, dtype=np.int64))
        self.cols = np.zeros((ncol, ROW))
        self.dummy_cbuf = np.zeros((1, n), dtype=np.uint8)


@dataclass
class FrameControl:
    """Collider rows at the start of one frame, each moving at its twist."""
    cols0: np.ndarray


def _eta_array(params: PhysicsParams) -> np.ndarray:
    return np.array([params.eta_t, params.eta_m])


def _raise(status: int, idx: int, where: str):
    if status == K.ERR_DOMAIN:
        raise OutOfDomainError(int(idx), where)
    if status == K.ERR_NAN:
        raise InstabilityError(int(idx), where)
    raise SimulationError(f"simulation failed with status {status}{where}")


def check_inside(particles: ParticleSystem, scene: SceneConfig, margin: int = 2):
    lo = np.asarray(scene.domain_lo) + margin * scene.dx
    hi = np.asarray(scene.domain_hi) - margin * scene.dx
    bad = np.nonzero(np.any((particles.positions < lo) | (particles.positions > hi), axis=1))[0]
    if len(bad):
        raise OutOfDomainError(int(bad[0]), " (initial state)")


class Stepper:
    """Owns the buffers used to advance one particle system."""

    def __init__(self, particles: ParticleSystem, scene: SceneConfig, ncol: int):
        self.scene = scene
        self.buf = Workspace(len(particles), scene, ncol)
        self.lo = np.asarray(scene.domain_lo, dtype=np.float64)
        self.gravity = np.asarray(scene.gravity, dtype=np.float64)

    def frame(self, state: ParticleSystem, cols0: np.ndarray, params: PhysicsParams,
              n_sub: int, contact_mode: int = K.DETECT, cbuf=None, crow0: int = 0,
              store=None, where: str = ""):
        sc = self.scene
        lame = params.lame
        dt = sc.frame_dt / n_sub
        if cbuf is None:
            cbuf = self.buf.dummy_cbuf
        if store is None:
            e = np.zeros((1, 1, 3))
            E = np.zeros((1, 1, 3, 3))
            store_flag, sx, sv, sC, sF = False, e, e, E, E
        else:
            store_flag = True
            sx, sv, sC, sF = store
        st, idx, s = K.run_frame(
            state.positions, state.velocities, state.affine, state.F_E, self.buf.grid,
            self.buf.ws, cols0, self.buf.cols, self.lo, sc.dx, dt, n_sub, self.gravity,
            lame.mu, lame.lam, params.sigma_y, params.rho * state.volume_per_particle,
            state.volume_per_particle, _eta_array(params), sc.bound, sc.plasticity,
            contact_mode, cbuf, crow0, store_flag, sx, sv, sC, sF)
        if st != K.OK:
            _raise(st, idx, f"{where}, substep {s}")


def frame_controls(traj, effector: RigidEffector | None, scene: SceneConfig):
    """Collider rows at the start of every frame of a sim-form trajectory.

    Frame j moves the effector from waypoint j-1 to waypoint j, so frame 0
    holds the first pose.
    """
    tab = table(scene.table_height).row()
    if effector is None or traj is None or len(traj) == 0:
        n = 0 if traj is None else len(traj)
        return [np.array([tab]) for _ in range(n)]
    dt = scene.frame_dt
    if abs(traj.dt - dt) > 1e-12:
        raise ValueError(f"trajectory spacing {traj.dt} does not match frame_dt {dt}")
    rots = Rotation.from_quat(traj.orientations)
    out = []
    for j in range(len(traj)):
        a = max(j - 1, 0)
        rel = (rots[j] * rots[a].inv()).as_rotvec()
        eff = replace(effector, position=traj.positions[a], orientation=traj.orientations[a],
                      velocity=(traj.positions[j] - traj.positions[a]) / dt,
                      angular_velocity=rel / dt)
        out.append(np.array([tab, eff.row()]))
    return out


def step(state: ParticleSystem, cols0: np.ndarray, params: PhysicsParams, scene: SceneConfig,
         n_substeps: int | None = None, stepper: Stepper | None = None) -> ParticleSystem:
    """Advances a copy of `state` by one frame.

    `cols0` holds the table/effector rows at the frame start; each collider
    moves at its own constant twist during the frame.
    """
    out = state.copy()
    out.rho = params.rho
    n_sub = n_substeps or scene.substeps_for(params)
    stepper = stepper or Stepper(out, scene, len(cols0))
    stepper.frame(out, np.ascontiguousarray(cols0, dtype=np.float64), params, n_sub)
    return out


def rollout(initial: ParticleSystem, traj, params: PhysicsParams, scene: SceneConfig,
            effector: RigidEffector | None = None, snapshots: bool = False,
            n_substeps: int | None = None):
    """Runs one frame per sim waypoint. Returns the final state (and snapshots)."""
    params.lame  # validates nu / E
    state = initial.copy()
    state.rho = params.rho
    snaps = [state.positions.copy()] if snapshots else None
    controls = frame_controls(traj, effector, scene)
    if not controls:
        return (state, snaps) if snapshots else state
    check_inside(state, scene)
    n_sub = n_substeps or scene.substeps_for(params)
    stepper = Stepper(state, scene, len(controls[0]))
    for j, cols0 in enumerate(controls):
        stepper.frame(state, cols0, params, n_sub, where=f" in frame {j}")
        if snapshots:
            snaps.append(state.positions.copy())
    return (state, snaps) if snapshots else state


# ------------------------------------------------------------------ single-kernel API


def particle_to_grid(particles: ParticleSystem, lame: LameParams, grid: EulerianGrid,
                     dt_sub: float, sigma_y: float = np.inf) -> EulerianGrid:
    """Substeps 1-3 on a copy of the particles; the grid is filled in place.

    Returns the grid; the updated deformation gradients are left on
    `grid.particles_after`.
    """
    n = len(particles)
    scene = SceneConfig(domain_lo=tuple(grid.lo), resolution=grid.resolution, dx=grid.dx)
    buf = Workspace(n, scene, 1)
    p = particles.copy()
    ws = buf.ws
    sy = float(min(sigma_y, 1e300))
    st, idx = K.p2g(p.positions, p.velocities, p.affine, p.F_E, grid.mass, grid.momentum,
                    ws[0], ws[1], ws[2], ws[3], ws[4], ws[5], ws[6], ws[7], ws[8], ws[9],
                    grid.lo, 1.0 / grid.dx, dt_sub, lame.mu, lame.lam, sy,
                    p.mass_per_particle, p.volume_per_particle, ws[13], np.isfinite(sigma_y))
    if st != K.OK:
        _raise(st, idx, " in particle_to_grid")
    grid.bbox = ws[13].copy()
    grid.particles_after = p
    grid.weights = ws[2].copy()
    return grid


def grid_update(grid: EulerianGrid, effectors: list, table_eff: RigidEffector | None,
                gravity, dt_sub: float, params: PhysicsParams, bound: int = 3) -> EulerianGrid:
    cols = [e.row() for e in ([table_eff] if table_eff is not None else []) + list(effectors)]
    cols = np.array(cols) if cols else np.zeros((0, ROW))
    r = tuple(grid.resolution)
    ncol = max(len(cols), 1)
    gvh = np.zeros(r + (3,))
    gnv = np.zeros(r + (ncol, 3))
    gnf = np.zeros(r + (ncol,), dtype=np.int8)
    bbox = getattr(grid, "bbox", np.array([0, 0, 0, r[0] - 1, r[1] - 1, r[2] - 1]))
    K.grid_update(grid.mass, grid.momentum, grid.velocity, gvh, gnv, gnf, bbox, grid.lo,
                  grid.dx, dt_sub, np.asarray(gravity, dtype=np.float64), cols,
                  _eta_array(params), bound)
    return grid


def grid_to_particle(grid: EulerianGrid, particles: ParticleSystem, effectors: list,
                     dt_sub: float, params: PhysicsParams,
                     table_eff: RigidEffector | None = None) -> ParticleSystem:
    n = len(particles)
    p = particles.copy()
    cols = [e.row() for e in ([table_eff] if table_eff is not None else []) + list(effectors)]
    cols = np.array(cols) if cols else np.zeros((0, ROW))
    inv_dx = 1.0 / grid.dx
    base = np.zeros((n, 3), dtype=np.int64)
    fx = np.zeros((n, 3))
    W = np.zeros((n, 3, 3))
    DW = np.zeros((n, 3, 3))
    xg = (p.positions - grid.lo) * inv_dx
    base[:] = np.floor(xg - 0.5).astype(np.int64)
    fx[:] = xg - base
    for i in range(n):
        K.bspline(fx[i], W[i], DW[i])
    ncol = max(len(cols), 1)
    st, idx = K.g2p(p.positions, p.velocities, p.affine, grid.velocity, base, fx, W,
                    np.zeros((n, 3)), np.zeros((n, ncol, 3)), np.zeros((n, ncol), dtype=np.int8),
                    inv_dx, dt_sub, cols, _eta_array(params), K.DETECT,
                    np.zeros(n, dtype=np.uint8))
    if st != K.OK:
        _raise(st, idx, " in grid_to_particle")
    return p


def bspline_weights(x, lo, dx) -> np.ndarray:
    """3x3x3 kernel weights of one particle."""
    xg = (np.asarray(x, dtype=np.float64) - lo) / dx
    b = np.floor(xg - 0.5)
    W = np.zeros((3, 3))
    DW = np.zeros((3, 3))
    K.bspline(xg - b, W, DW)
    return np.einsum("i,j,k->ijk", W[:, 0], W[:, 1], W[:, 2])
