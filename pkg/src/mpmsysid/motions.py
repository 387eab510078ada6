"""The manipulation motions used for identification, validation and planning.

Each motion is a list of relative end-effector moves. The real-form
trajectory mimics a motion-planner output: a fixed number of waypoints with
uneven timestamps, built so that constant-dt resampling gives the listed
number of simulation frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DomainError
from .geometry import REAL, SIM, Trajectory, resample_trajectory

# rotations are weighted like an arc of this radius when waypoints are spread
ARC_RADIUS = 0.025


@dataclass(frozen=True)
class Motion:
    name: str
    segments: tuple          # ((axis, amount), ...); axis "x"/"y"/"z" in m or "rz" in rad
    duration: float          # s
    real_waypoints: int
    sim_waypoints: int
    effector: str = "rectangle"

    def real(self, start=(0.0, 0.0, 0.0), seed: int = 0, frame_dt: float = 0.01) -> Trajectory:
        return planner_timed(start, self.segments, self.duration, self.real_waypoints,
                             self.sim_waypoints, frame_dt, seed)

    def sim(self, start=(0.0, 0.0, 0.0), seed: int = 0, frame_dt: float = 0.01) -> Trajectory:
        return resample_trajectory(self.real(start, seed, frame_dt), frame_dt)


def _seg(*pairs):
    return tuple((a, float(d)) for a, d in pairs)


MOTIONS = {
    "poking-1": Motion("poking-1", _seg(("z", -0.015), ("z", 0.03)), 0.86, 38, 87),
    "poking-2": Motion("poking-2", _seg(("z", -0.02), ("z", 0.03)), 0.93, 40, 94),
    "poking-shifting-1": Motion("poking-shifting-1",
                                _seg(("z", -0.02), ("x", -0.03), ("z", 0.03)), 1.52, 68, 152),
    "poking-shifting-2": Motion("poking-shifting-2",
                                _seg(("z", -0.02), ("x", 0.03), ("z", 0.03)), 1.50, 54, 153),
    "flattening": Motion("flattening",
                         _seg(("z", -0.025), ("x", 0.025), ("z", 0.025), ("x", -0.025),
                              ("z", -0.025), ("x", -0.025), ("z", 0.025)),
                         3.74, 275, 378, "cylinder"),
    "triple-poking": Motion("triple-poking",
                            _seg(("y", 0.025), ("z", -0.025), ("z", 0.025), ("y", -0.025),
                                 ("z", -0.025), ("z", 0.025), ("y", -0.025), ("z", -0.025),
                                 ("z", 0.025)),
                            4.55, 328, 460, "round"),
    "poking-180-rotating": Motion("poking-180-rotating",
                                  _seg(("z", -0.025), ("rz", math.pi), ("z", 0.025)),
                                  6.23, 504, 625, "rectangle"),
}
TRAINING_MOTIONS = ("poking-1", "poking-2", "poking-shifting-1", "poking-shifting-2")
VALIDATION_MOTIONS = ("flattening", "triple-poking", "poking-180-rotating")


def get_motion(name: str) -> Motion:
    try:
        return MOTIONS[name]
    except KeyError:
        raise DomainError(f"unknown motion {name!r}; known: {', '.join(MOTIONS)}") from None


def _spread(total: int, weights, rng) -> np.ndarray:
    """Integer split of `total` (each share >= 1) roughly proportional to weights."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if total < n:
        raise DomainError("fewer intervals than segments")
    share = np.ones(n, dtype=np.int64)
    extra = total - n
    if extra:
        raw = w / w.sum() * extra
        add = np.floor(raw).astype(np.int64)
        rest = extra - add.sum()
        order = np.lexsort((rng.random(n), -(raw - add)))
        add[order[:rest]] += 1
        share += add
    return share


def planner_timed(start, segments, duration: float, n_waypoints: int, n_frames: int,
                  frame_dt: float = 0.01, seed: int = 0) -> Trajectory:
    """Real trajectory with n_waypoints uneven waypoints resampling to n_frames.

    Intervals get k >= 1 frames each (k summing to n_frames - 1) and a
    duration k*frame_dt plus a jitter below half a frame, shifted so the
    total duration is exact. Waypoints are evenly spaced along each segment.
    """
    n_int = n_waypoints - 1
    if n_int < len(segments) or n_frames - 1 < n_int:
        raise DomainError("waypoint / frame counts cannot realise this motion")
    rng = np.random.default_rng(seed)
    k = _spread(n_frames - 1, np.ones(n_int), rng)
    rng.shuffle(k)
    slack = (duration - k.sum() * frame_dt) / n_int
    u = rng.uniform(-0.3, 0.3, n_int) * frame_dt
    d = k * frame_dt + (u - u.mean()) + slack
    if np.any(np.abs(d - k * frame_dt) >= 0.5 * frame_dt) or np.any(d <= 0):
        raise DomainError("duration is inconsistent with the frame count")
    times = np.concatenate([[0.0], np.cumsum(d)])
    times[-1] = duration
    lengths = [abs(a) * (ARC_RADIUS if ax == "rz" else 1.0) for ax, a in segments]
    per_seg = _spread(n_int, lengths, rng)
    p = np.asarray(start, dtype=np.float64).copy()
    rot = Rotation.identity()
    pos, quats = [p.copy()], [rot.as_quat()]
    for (axis, amount), n in zip(segments, per_seg):
        for m in range(1, n + 1):
            if axis == "rz":
                quats.append((Rotation.from_euler("z", amount * m / n) * rot).as_quat())
                pos.append(p.copy())
            else:
                q = p.copy()
                q["xyz".index(axis)] += amount * m / n
                pos.append(q)
                quats.append(rot.as_quat())
        if axis == "rz":
            rot = Rotation.from_euler("z", amount) * rot
        else:
            p["xyz".index(axis)] += amount
    return Trajectory(times, np.array(pos), np.array(quats), REAL)


def quick_motion(start, segments, durations, frame_dt: float = 0.01) -> Trajectory:
    """Sim-form trajectory of a short custom motion at constant speed per segment.

    Each segment lasts round(duration / frame_dt) frames (at least one).
    """
    p = np.asarray(start, dtype=np.float64).copy()
    rot = Rotation.identity()
    pos, quats = [p.copy()], [rot.as_quat()]
    for (axis, amount), dur in zip(segments, durations):
        n = max(1, int(math.floor(dur / frame_dt + 0.5)))
        for m in range(1, n + 1):
            if axis == "rz":
                quats.append((Rotation.from_euler("z", amount * m / n) * rot).as_quat())
                pos.append(p.copy())
            else:
                q = p.copy()
                q["xyz".index(axis)] += amount * m / n
                pos.append(q)
                quats.append(rot.as_quat())
        if axis == "rz":
            rot = Rotation.from_euler("z", amount) * rot
        else:
            p["xyz".index(axis)] += amount
    return Trajectory(frame_dt * np.arange(len(pos)), np.array(pos), np.array(quats), SIM,
                      frame_dt)
