import math

import numpy as np
import pytest

from mpmsysid import geometry as g
from mpmsysid import planner as P
from mpmsysid.motions import quick_motion
from mpmsysid.sim import ParticleSystem, PhysicsParams, SceneConfig

SOFT = PhysicsParams(1.2e7, 0.3, 1300, 1e6, 0.5, 0.6)


def press():
    return quick_motion((0, 0, 0.002), [("z", -0.012), ("z", 0.004)], [0.04, 0.02])


def wild():
    # drags the body out of the domain from some start points
    return quick_motion((0, 0, 0.0), [("z", -0.03), ("x", 0.3)], [0.03, 0.05])


@pytest.fixture(scope="module")
def tall():
    body = g.fill_particles(g.Box((0, 0, 0.02), (0.02, 0.02, 0.02)), 4e6,
                            np.random.default_rng(7))
    ps = ParticleSystem.at_rest(body.points, 0.25e-6)
    hm = g.rasterize_heightmap(ps.positions, (0, 0))
    target = g.HeightMap(np.minimum(hm.values, 0.02), (0, 0))
    return ps, target, SceneConfig.around((0, 0), 0.4, 32)


@pytest.fixture(scope="module")
def planned(tall):
    ps, target, scene = tall
    log = []
    plan = P.greedy_plan(ps, target, SOFT, [press(), wild()], n_actions=2, scene=scene,
                         log=log.append)
    first = P.evaluate_candidates(ps, target, SOFT, [press(), wild()], scene)
    return plan, first, log


def test_candidate_order():
    c = P.candidates()
    assert len(c) == 19
    assert c[0] == (1, (-1, -1)) and c[1] == (1, (-1, 0)) and c[8] == (1, (1, 1))
    assert c[9] == (2, (-1, -1)) and c[17] == (2, (1, 1))
    assert c[18] == (None, (0, 0))
    assert len(P.candidates(1)) == 10


def test_place_skill(tall):
    ps, _, _ = tall
    traj, z = P.place_skill(press(), ps, (1, -1), 0.03)
    c = ps.positions[:, :2].mean(axis=0)
    assert z == ps.positions[:, 2].max()
    assert np.allclose(traj.positions[0], [c[0] + 0.03, c[1] - 0.03, z], rtol=0, atol=1e-15)
    assert np.allclose(np.diff(traj.positions, axis=0), np.diff(press().positions, axis=0),
                       rtol=0, atol=1e-15)


def test_first_step_is_candidate_argmin(planned):
    plan, first, _ = planned
    k = int(np.argmin(first))          # first index among ties
    skill, off = P.candidates()[k]
    assert (plan.actions[0].skill, plan.actions[0].offset) == (skill, off)
    assert plan.losses[0] == first[k]
    assert first[-1] == plan.initial_loss


def test_losses_never_increase(planned):
    plan, _, _ = planned
    seq = [plan.initial_loss] + plan.losses
    assert all(b <= a for a, b in zip(seq, seq[1:]))


def test_press_flattens(planned):
    plan, _, _ = planned
    assert not plan.actions[0].empty and plan.actions[0].skill == 1
    assert plan.losses[-1] < plan.initial_loss
    assert plan.final.positions[:, 2].max() < 0.04


def test_infeasible_candidates_are_logged(planned):
    plan, first, log = planned
    bad = [i for i, v in enumerate(first) if math.isinf(v)]
    assert bad and all(P.candidates()[i][0] == 2 for i in bad)
    assert [ci for step, ci, _ in plan.infeasible if step == 0] == bad
    assert any("infeasible" in line for line in log)


def test_target_equal_to_initial_gives_empty_plan(small_body, scene):
    ps = ParticleSystem.at_rest(small_body.points, 0.25e-6)
    target = g.rasterize_heightmap(ps.positions, (0, 0))
    plan = P.greedy_plan(ps, target, SOFT, [press()], n_actions=2, scene=scene)
    assert len(plan) == 2 and all(a.empty for a in plan.actions)
    assert plan.losses == [0.0, 0.0] and plan.initial_loss == 0.0
    again = P.greedy_plan(ps, target, SOFT, [press()], n_actions=2, scene=scene)
    assert again.actions == plan.actions
    assert np.array_equal(again.final.positions, plan.final.positions)
