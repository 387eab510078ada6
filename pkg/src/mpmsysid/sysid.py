"""Parameter identification: Adam on rollout losses, validation metrics, datasets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .adjoint import ParamGradient, backward, record
from .errors import DomainError, SimulationError
from .geometry import (DEFAULT_DENSITY, FILLED, HM_CELLS, HM_EXTENT, SIM, SURFACE, HeightMap,
                       NoiseConfig, PointSet, rasterize_heightmap, reconstruct_filled,
                       synthesize_observation)
from .losses import HEIGHTMAP, LOSS_KINDS, PRT_EMD, loss_and_grad
from .sim import (PARAM_BOX, PARAM_NAMES, ParticleSystem, PhysicsParams, SceneConfig,
                  make_effector, rollout)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
STEP_SIZES = {"E": 4e6, "nu": 0.01, "rho": 10.0, "sigma_y": 5e5, "eta_t": 0.01, "eta_m": 0.01}


class IdentifyError(SimulationError):
    def __init__(self, iteration: int, datapoint: str, cause: Exception):
        super().__init__(f"iteration {iteration}, datapoint {datapoint!r}: {cause}")
        self.iteration = iteration
        self.datapoint = datapoint
        self.cause = cause


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    params: PhysicsParams
    m: np.ndarray = field(default_factory=lambda: np.zeros(6))
    v: np.ndarray = field(default_factory=lambda: np.zeros(6))
    t: int = 0


def _vec(d, default) -> np.ndarray:
    d = dict(default, **(d or {}))
    unknown = set(d) - set(PARAM_NAMES)
    if unknown:
        raise DomainError(f"unknown parameter names {sorted(unknown)}")
    return np.array([d[k] for k in PARAM_NAMES], dtype=np.float64)


def adam_step(state: OptimizerState, grad, step_sizes=None, box=None) -> OptimizerState:
    """One Adam update with per-parameter step sizes, then projection onto the box.

    Moments are kept for the gradient expressed per unit step (g * step
    size), so the update is the step size times the usual normalized
    direction and eps is comparable across parameters of any scale.
    """
    g = grad.as_array() if isinstance(grad, ParamGradient) else np.asarray(grad, dtype=float)
    if g.shape != (6,) or not np.all(np.isfinite(g)):
        raise DomainError(f"gradient must be 6 finite numbers, got {g!r}")
    lr = _vec(step_sizes, STEP_SIZES)
    bx = dict(PARAM_BOX, **(box or {}))
    lo = np.array([bx[k][0] for k in PARAM_NAMES])
    hi = np.array([bx[k][1] for k in PARAM_NAMES])
    gs = g * lr
    t = state.t + 1
    m = BETA1 * state.m + (1.0 - BETA1) * gs
    v = BETA2 * state.v + (1.0 - BETA2) * gs * gs
    mh = m / (1.0 - BETA1 ** t)
    vh = v / (1.0 - BETA2 ** t)
    theta = state.params.as_array() - lr * mh / (np.sqrt(vh) + EPS)
    theta = np.minimum(np.maximum(theta, lo), hi)
    return OptimizerState(PhysicsParams.from_array(theta), m, v, t)


# ------------------------------------------------------------------ data


@dataclass
class DataPoint:
    initial: PointSet                 # filled particle set before the motion
    target_cloud: PointSet            # observed surface cloud after the motion
    target_filled: PointSet           # particles reconstructed from the observation
    trajectory: object                # sim-form Trajectory
    effector_kind: str
    frame_dt: float = 0.01
    volume_per_particle: float = 1.0 / DEFAULT_DENSITY
    hm_origin: tuple = (0.0, 0.0)
    target_heightmap: HeightMap | None = None
    name: str = "datapoint"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trajectory.form != SIM:
            raise DomainError(f"{self.name}: trajectory must be in sim form")
        if abs(self.trajectory.dt - self.frame_dt) > 1e-12 and len(self.trajectory):
            raise DomainError(f"{self.name}: trajectory dt differs from frame_dt")
        if self.target_heightmap is None:
            self.target_heightmap = rasterize_heightmap(self.target_cloud.points, self.hm_origin)

    def initial_system(self) -> ParticleSystem:
        return ParticleSystem.at_rest(self.initial.points, self.volume_per_particle)

    def effector(self):
        return make_effector(self.effector_kind)

    def heightmap_of(self, positions) -> HeightMap:
        hm = self.target_heightmap
        return rasterize_heightmap(positions, hm.origin, hm.extent, hm.cells)

    def target_for(self, kind: str):
        if kind == HEIGHTMAP:
            return self.target_heightmap
        if kind.startswith("PCD"):
            return self.target_cloud.points
        if kind.startswith("PRT"):
            return self.target_filled.points
        raise DomainError(f"unknown loss kind {kind!r}")

    # on-disk layout: one directory per datapoint
    def save(self, path) -> None:
        d = Path(path)
        d.mkdir(parents=True, exist_ok=False)
        io.write_ply(d / "initial_filled.ply", self.initial.points)
        io.write_ply(d / "target_cloud.ply", self.target_cloud.points)
        io.write_ply(d / "target_filled.ply", self.target_filled.points)
        io.write_trajectory(d / "trajectory.csv", self.trajectory)
        io.write_heightmap_csv(d / "target_heightmap.csv", self.target_heightmap)
        io.write_json(d / "meta.json", {
            "name": self.name, "effector": self.effector_kind, "frame_dt_s": self.frame_dt,
            "volume_per_particle_m3": self.volume_per_particle,
            "heightmap_origin_m": list(self.hm_origin), **self.meta})

    @classmethod
    def load(cls, path) -> "DataPoint":
        d = Path(path)
        if not d.is_dir():
            raise DomainError(f"datapoint directory {d} does not exist")
        meta = io.read_json(d / "meta.json")
        dt = float(meta.pop("frame_dt_s"))
        hm = d / "target_heightmap.csv"
        return cls(PointSet(io.read_ply(d / "initial_filled.ply"), FILLED),
                   PointSet(io.read_ply(d / "target_cloud.ply"), SURFACE),
                   PointSet(io.read_ply(d / "target_filled.ply"), FILLED),
                   io.read_trajectory(d / "trajectory.csv", SIM, dt),
                   meta.pop("effector"), dt, float(meta.pop("volume_per_particle_m3")),
                   tuple(meta.pop("heightmap_origin_m")),
                   io.read_heightmap_csv(hm) if hm.exists() else None,
                   meta.pop("name", d.name), meta)


class Dataset(list):
    """A list of DataPoints."""

    def save(self, path) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for i, dp in enumerate(self):
            dp.save(root / f"{i:03d}_{dp.name}")

    @classmethod
    def load(cls, path) -> "Dataset":
        root = Path(path)
        dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists()) if root.is_dir() else []
        if not dirs:
            raise DomainError(f"no datapoints under {root}")
        return cls(DataPoint.load(p) for p in dirs)


def make_datapoint(body: PointSet, trajectory, effector_kind: str, params: PhysicsParams,
                   scene: SceneConfig, noise: NoiseConfig, rng: np.random.Generator,
                   name: str = "datapoint", density: float = DEFAULT_DENSITY,
                   n_substeps: int | None = None) -> DataPoint:
    """Simulates one motion with the given parameters and observes the result."""
    vol = 1.0 / density
    ps = ParticleSystem.at_rest(body.points, vol)
    final = rollout(ps, trajectory, params, scene, make_effector(effector_kind),
                    n_substeps=n_substeps)
    obs = synthesize_observation(final.positions, noise, rng)
    filled = reconstruct_filled(obs.dense.points, max_count=len(ps), density=density, rng=rng)
    origin = tuple(float(a) for a in body.points[:, :2].mean(axis=0))
    hm = rasterize_heightmap(obs.dense.points, origin, HM_EXTENT, HM_CELLS)
    return DataPoint(body, obs.cloud, filled, trajectory, effector_kind, scene.frame_dt, vol,
                     origin, hm, name, {"observation_offset_m": [float(a) for a in obs.offset]})


# ------------------------------------------------------------------ metrics


@dataclass
class MetricTable:
    names: list
    rows: np.ndarray                 # datapoints x LOSS_KINDS

    @property
    def means(self) -> dict:
        return {k: float(np.mean(self.rows[:, i])) for i, k in enumerate(LOSS_KINDS)}

    def __getitem__(self, kind: str) -> float:
        return self.means[kind]


def metrics_of(positions, dp: DataPoint) -> np.ndarray:
    """All five distances between simulated final positions and a datapoint."""
    out = np.empty(len(LOSS_KINDS))
    for i, k in enumerate(LOSS_KINDS):
        out[i] = loss_and_grad(positions, dp.target_for(k), k, need_grad=False)[0].value
    return out


def validate(params: PhysicsParams, dataset, scene: SceneConfig | None = None,
             n_substeps: int | None = None) -> MetricTable:
    """Forward rollouts only; every metric for every datapoint."""
    params.validate()
    rows = []
    for dp in dataset:
        sc = scene or scene_for(dp)
        final = rollout(dp.initial_system(), dp.trajectory, params, sc, dp.effector(),
                        n_substeps=n_substeps)
        rows.append(metrics_of(final.positions, dp))
    return MetricTable([dp.name for dp in dataset], np.array(rows).reshape(-1, len(LOSS_KINDS)))


def scene_for(dp: DataPoint, size: float = 0.4, n: int = 32, **kw) -> SceneConfig:
    """Default simulation domain centred on a datapoint's body."""
    return SceneConfig.around(dp.hm_origin, size=size, n=n, frame_dt=dp.frame_dt, **kw)


# ------------------------------------------------------------------ identification


@dataclass
class IterationRecord:
    iteration: int                   # number of updates applied so far
    params: PhysicsParams
    train_loss: float
    metrics: dict                    # validation means per loss kind
    grad: np.ndarray | None = None   # averaged gradient at these params (None at the end)


@dataclass
class IdentifyResult:
    best: PhysicsParams
    best_iteration: int
    initial: IterationRecord
    history: list                    # one record per update

    @property
    def final(self) -> IterationRecord:
        return self.history[-1] if self.history else self.initial

    def records(self):
        return [self.initial] + list(self.history)


HISTORY_HEADER = ["iteration"] + list(PARAM_NAMES) + ["train_loss"] + list(LOSS_KINDS)


def history_rows(result: IdentifyResult, include_initial: bool = False):
    recs = result.records() if include_initial else result.history
    return [[r.iteration] + [float(x) for x in r.params.as_array()] + [float(r.train_loss)]
            + [float(r.metrics[k]) for k in LOSS_KINDS] for r in recs]


def identify(dataset, loss_kind: str = PRT_EMD, init: PhysicsParams | None = None,
             iterations: int = 100, seed: int = 0, scene: SceneConfig | None = None,
             validation=None, step_sizes=None, box=None, allow_heightmap: bool = False,
             n_substeps: int | None = None, callback=None) -> IdentifyResult:
    """Adam on the dataset-averaged loss gradient.

    History row k holds the parameters after k updates with the training
    loss and the validation metrics at those parameters. Without a
    validation set the training datapoints are used, which reuses the
    training rollouts. best = lowest validation heightmap distance over the
    initial point and all rows (earliest wins ties).
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("identify needs at least one datapoint")
    if loss_kind not in LOSS_KINDS:
        raise DomainError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == HEIGHTMAP and not allow_heightmap:
        raise DomainError("the heightmap loss is not optimizable unless explicitly allowed")
    if iterations < 0:
        raise DomainError("iterations must be >= 0")
    if init is None:
        init = PhysicsParams.random(np.random.default_rng(seed))
    init.validate()
    scenes = [scene or scene_for(dp) for dp in dataset]
    vscenes = None if validation is None else [scene or scene_for(dp) for dp in validation]

    def evaluate(params, it, need_grad):
        losses, grads, rows = [], [], []
        for dp, sc in zip(dataset, scenes):
            try:
                if need_grad:
                    final, tape = record(dp.initial_system(), dp.trajectory, params, sc,
                                         dp.effector(), n_substeps=n_substeps)
                    loss, g = backward(tape, loss_kind, dp.target_for(loss_kind))
                    grads.append(g.as_array())
                else:
                    final = rollout(dp.initial_system(), dp.trajectory, params, sc,
                                    dp.effector(), n_substeps=n_substeps)
                    loss = loss_and_grad(final.positions, dp.target_for(loss_kind), loss_kind,
                                         need_grad=False)[0]
                losses.append(loss.value)
                if validation is None:
                    rows.append(metrics_of(final.positions, dp))
            except Exception as e:
                raise IdentifyError(it, dp.name, e) from e
        if validation is None:
            metrics = MetricTable([dp.name for dp in dataset], np.array(rows)).means
        else:
            metrics = {}
            vrows = []
            for dp, sc in zip(validation, vscenes):
                try:
                    final = rollout(dp.initial_system(), dp.trajectory, params, sc,
                                    dp.effector(), n_substeps=n_substeps)
                except Exception as e:
                    raise IdentifyError(it, dp.name, e) from e
                vrows.append(metrics_of(final.positions, dp))
            metrics = MetricTable([dp.name for dp in validation], np.array(vrows)).means
        grad = np.mean(grads, axis=0) if need_grad else None
        return IterationRecord(it, params, math.fsum(losses) / len(losses), metrics, grad)

    state = OptimizerState(init)
    first = evaluate(init, 0, iterations > 0)
    best, best_it, best_hm = init, 0, first.metrics[HEIGHTMAP]
    history = []
    rec = first
    if callback:
        callback(rec)
    for it in range(1, iterations + 1):
        state = adam_step(state, rec.grad, step_sizes, box)
        rec = evaluate(state.params, it, it < iterations)
        history.append(rec)
        if rec.metrics[HEIGHTMAP] < best_hm:
            best, best_it, best_hm = state.params, it, rec.metrics[HEIGHTMAP]
        if callback:
            callback(rec)
    return IdentifyResult(best, best_it, first, history)


def write_params(path, params: PhysicsParams) -> None:
    """Key-value file in SI units."""
    units = {"E": "Pa", "nu": "1", "rho": "kg/m^3", "sigma_y": "Pa", "eta_t": "1", "eta_m": "1"}
    with open(path, "w") as fh:
        for k in PARAM_NAMES:
            fh.write(f"{k} = {float(getattr(params, k))!r}  # {units[k]}\n")


def read_params(path) -> PhysicsParams:
    vals = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, _, v = line.partition("=")
        vals[k.strip()] = float(v)
    missing = set(PARAM_NAMES) - set(vals)
    extra = set(vals) - set(PARAM_NAMES)
    if missing or extra:
        raise DomainError(f"{path}: missing {sorted(missing)}, unknown {sorted(extra)}")
    return PhysicsParams(**vals)


def plateau_iteration(losses, rel_tol: float = 1e-3, window: int = 5) -> int | None:
    """First index after which `window` consecutive losses all stay within
    rel_tol (relative to the loss at that index); None if never."""
    x = np.asarray(losses, dtype=np.float64)
    for i in range(len(x) - window):
        ref = abs(x[i]) or 1.0
        if np.all(np.abs(x[i + 1:i + 1 + window] - x[i]) <= rel_tol * ref):
            return i
    return None
