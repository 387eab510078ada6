"""Greedy exhaustive search over skill x location actions toward a target heightmap."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import HeightMap, Trajectory, rasterize_heightmap
from .losses import heightmap_distance
from .sim import ParticleSystem, PhysicsParams, SceneConfig, make_effector, rollout

OFFSET_UNIT = 0.03
OFFSETS = tuple((j, k) for j in (-1, 0, 1) for k in (-1, 0, 1))


@dataclass(frozen=True)
class Action:
    skill: int | None          # 1-based skill index, None for the empty action
    offset: tuple = (0, 0)     # (j, k) in units of OFFSET_UNIT along x / y
    start_z: float = 0.0       # effector tip height at the start of the skill

    @property
    def empty(self) -> bool:
        return self.skill is None


@dataclass
class Plan:
    actions: list = field(default_factory=list)
    losses: list = field(default_factory=list)        # heightmap distance after each step
    initial_loss: float = 0.0
    heightmaps: list = field(default_factory=list)    # after each step
    infeasible: list = field(default_factory=list)    # (step, candidate index, message)
    final: ParticleSystem | None = None

    def __len__(self):
        return len(self.actions)


def candidates(n_skills: int = 2):
    """Skill 1 before skill 2, offsets row-major, the empty action last."""
    out = [(s, o) for s in range(1, n_skills + 1) for o in OFFSETS]
    out.append((None, (0, 0)))
    return out


def place_skill(skill: Trajectory, state: ParticleSystem, offset, unit: float = OFFSET_UNIT):
    """Skill trajectory moved to start above the body centre plus the offset,
    at the current top height of the body."""
    c = state.positions[:, :2].mean(axis=0)
    top = float(state.positions[:, 2].max())
    start = np.array([c[0] + offset[0] * unit, c[1] + offset[1] * unit, top])
    return skill.shifted(start - skill.positions[0]), top


def greedy_plan(initial: ParticleSystem, target: HeightMap, params: PhysicsParams, skills,
                n_actions: int = 8, scene: SceneConfig | None = None,
                effector: str = "rectangle", unit: float = OFFSET_UNIT, log=None) -> Plan:
    """At each step roll out every candidate from the current state and commit
    the one with the lowest heightmap distance (first found wins ties).

    A candidate whose rollout fails counts as infinitely bad.
    """
    params.validate()
    scene = scene or SceneConfig.around(target.origin)
    eff = make_effector(effector)

    def loss_of(x):
        return heightmap_distance(rasterize_heightmap(x, target.origin, target.extent,
                                                      target.cells), target).value

    state = initial.copy()
    state.rho = params.rho
    current = loss_of(state.positions)
    plan = Plan(initial_loss=current)
    for step in range(n_actions):
        best, best_loss, best_state, best_z = None, math.inf, None, 0.0
        for ci, (skill, off) in enumerate(candidates(len(skills))):
            if skill is None:
                loss, nxt, z = current, state, float(state.positions[:, 2].max())
            else:
                traj, z = place_skill(skills[skill - 1], state, off, unit)
                try:
                    nxt = rollout(state, traj, params, scene, eff)
                    loss = loss_of(nxt.positions)
                except Exception as e:  # unstable or out-of-domain candidate
                    plan.infeasible.append((step, ci, str(e)))
                    if log:
                        log(f"step {step}: candidate {ci} infeasible: {e}")
                    continue
            if loss < best_loss:
                best, best_loss, best_state, best_z = (skill, off), loss, nxt, z
        state = best_state
        current = best_loss
        plan.actions.append(Action(best[0], best[1], best_z))
        plan.losses.append(best_loss)
        plan.heightmaps.append(rasterize_heightmap(state.positions, target.origin,
                                                   target.extent, target.cells))
        if log:
            log(f"step {step}: skill={best[0]} offset={best[1]} loss={best_loss:.3f}")
    plan.final = state
    return plan


def evaluate_candidates(state: ParticleSystem, target: HeightMap, params: PhysicsParams, skills,
                        scene: SceneConfig | None = None, effector: str = "rectangle",
                        unit: float = OFFSET_UNIT) -> np.ndarray:
    """Heightmap distance after every candidate from one state (inf when infeasible)."""
    scene = scene or SceneConfig.around(target.origin)
    eff = make_effector(effector)
    s0 = state.copy()
    s0.rho = params.rho
    out = []
    for skill, off in candidates(len(skills)):
        if skill is None:
            x = s0.positions
        else:
            traj, _ = place_skill(skills[skill - 1], s0, off, unit)
            try:
                x = rollout(s0, traj, params, scene, eff).positions
            except Exception:
                out.append(math.inf)
                continue
        out.append(heightmap_distance(rasterize_heightmap(x, target.origin, target.extent,
                                                          target.cells), target).value)
    return np.array(out)
