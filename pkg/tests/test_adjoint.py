import numpy as np
import pytest

from mpmsysid import adjoint as adj
from mpmsysid import geometry as g
from mpmsysid import losses as L
from mpmsysid.motions import quick_motion
from mpmsysid.sim import PARAM_NAMES, ParticleSystem, PhysicsParams, SceneConfig, make_effector
from mpmsysid.sysid import Dataset, make_datapoint


def press(frames=(0.05, 0.03)):
    return quick_motion((0.002, 0.001, 0.027), [("z", -0.006), ("x", 0.004)], frames)


@pytest.fixture
def system(small_body):
    return ParticleSystem.at_rest(small_body.points, 0.25e-6)


@pytest.fixture(scope="module")
def taped():
    """A short press on the small body, taped with its contact table."""
    body = g.fill_particles(g.Box((0, 0, 0.012), (0.02, 0.02, 0.012)), 4e6,
                            np.random.default_rng(7))
    ps = ParticleSystem.at_rest(body.points, 0.25e-6)
    scene = SceneConfig.around((0, 0), 0.4, 32)
    theta = PhysicsParams(1.2e7, 0.3, 1300, 1e6, 0.5, 0.6)
    eff = make_effector("rectangle")
    final, tape = adj.record(ps, press(), theta, scene, eff, keep_contacts=True)
    star = PhysicsParams(2e7, 0.35, 1400, 1.5e6, 0.7, 0.5)
    dp = make_datapoint(body, press(), "rectangle", star, scene, g.NoiseConfig(),
                        np.random.default_rng(0))
    return ps, scene, theta, eff, final, tape, dp


def test_empty_tape(system, scene, soft):
    final, tape = adj.record(system, g.Trajectory.empty(), soft, scene)
    assert len(tape) == 0 and tape.frames == 0
    assert np.array_equal(final.positions, system.positions)
    assert np.array_equal(adj.backward_raw(tape, np.ones((len(system), 3))), np.zeros(6))


def test_tape_length(taped):
    _, _, _, _, _, tape, _ = taped
    # one frame per waypoint
    assert tape.frames == len(press()) == 9 and len(tape) == 9 * tape.n_sub
    assert tape.contacts.shape == (len(tape), len(tape.initial))
    assert tape.contacts.any()


def test_replay_bit_identical(taped):
    ps, scene, theta, eff, final, tape, _ = taped
    assert np.array_equal(adj.replay(tape).positions, final.positions)
    again, _ = adj.record(ps, press(), theta, scene, eff, n_substeps=tape.n_sub,
                          freeze_contacts=tape.contacts)
    assert np.array_equal(again.positions, final.positions)


def test_linear_in_output_adjoint(taped):
    tape = taped[5]
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, len(tape.initial), 3))
    ga, gb = adj.backward_raw(tape, a), adj.backward_raw(tape, b)
    gab = adj.backward_raw(tape, 2.0 * a - 3.0 * b)
    assert np.allclose(gab, 2.0 * ga - 3.0 * gb, rtol=1e-9, atol=1e-12 * np.abs(gab).max())


def test_keep_states_equivalent(taped):
    ps, scene, theta, eff, final, tape, dp = taped
    _, lean = adj.record(ps, press(), theta, scene, eff, keep_states=False)
    assert tape.states is not None and lean.states is None
    gx = np.random.default_rng(1).normal(size=(len(ps), 3))
    assert np.array_equal(adj.backward_raw(tape, gx), adj.backward_raw(lean, gx))


def test_no_contact_no_friction_gradient(system, scene, soft):
    # effector stays far above the body; the body rests without sliding
    traj = quick_motion((0.0, 0.0, 0.15), [("x", 0.01)], [0.05])
    _, tape = adj.record(system, traj, soft, scene, make_effector("rectangle"))
    gx = np.random.default_rng(2).normal(size=(len(system), 3))
    raw = adj.backward_raw(tape, gx)
    assert raw[5] == 0.0
    assert np.all(np.isfinite(raw))


def test_no_yield_no_yield_gradient(system, soft):
    scene = SceneConfig.around((0, 0), 0.4, 32, gravity=(0.0, 0.0, 0.0))
    traj = quick_motion((0.0, 0.0, 0.15), [("x", 0.01)], [0.03])
    _, tape = adj.record(system, traj, soft, scene, make_effector("rectangle"))
    raw = adj.backward_raw(tape, np.random.default_rng(3).normal(size=(len(system), 3)))
    assert raw[2] == 0.0 and raw[4] == 0.0 and raw[5] == 0.0


@pytest.mark.parametrize("kind", L.POINT_KINDS + (L.HEIGHTMAP,))
def test_gradient_matches_frozen_fd(taped, kind):
    ps, scene, theta, eff, final, tape, dp = taped
    tgt = dp.target_for(kind)
    _, G = adj.backward(tape, kind, tgt)
    G = G.as_array()
    f = L.frozen_loss(final.positions, tgt, kind)

    def fun(p):
        out, _ = adj.record(ps, press(), p, scene, eff, n_substeps=tape.n_sub,
                            freeze_contacts=tape.contacts, keep_states=False)
        return f(out.positions)

    fd = adj.fd_gradient(fun, theta, rel_step=1e-6)
    for k, name in enumerate(PARAM_NAMES):
        # compare in units of a relative parameter change
        s = theta.as_array()[k]
        assert abs(G[k] - fd[name]) * s <= 1e-3 * abs(fd[name]) * s + 1e-6, (name, G[k], fd[name])


def test_fd_gradient_of_linear_function(soft):
    w = np.array([1.0, -2.0, 3.0, 0.5, 7.0, -1.0])
    fd = adj.fd_gradient(lambda p: float(w @ p.as_array()), soft)
    # roundoff of the large E term limits the small parameters
    assert np.allclose([fd[n] for n in PARAM_NAMES], w, rtol=1e-4)


# ------------------------------------------------------------------ landscape


def test_center():
    M = np.array([[1.0, 2.0], [np.nan, 6.0]])
    C = adj.center(M)
    assert np.isnan(C[1, 0]) and np.nansum(C) == pytest.approx(0.0, abs=1e-15)
    assert C[0, 0] == -2.0


def test_landscape_counts_and_centering(taped):
    _, scene, theta, _, _, _, dp = taped
    short = quick_motion((0.002, 0.001, 0.027), [("z", -0.004)], [0.02])
    dpp = make_datapoint(dp.initial, short, "rectangle", theta, scene, g.NoiseConfig(enabled=False),
                         np.random.default_rng(0))
    M, va, vb = adj.landscape_sweep(("E", "nu"), theta, Dataset([dpp]), L.PRT_CD, scene,
                                    intervals=3)
    assert M.shape == (3, 3) and np.isfinite(M).sum() == 9
    assert abs(M.sum()) <= 1e-9 * np.abs(M).max()
    assert va[0] == 1e7 and va[-1] == 3e8 and vb[0] == 0.01


def test_landscape_friction_without_contact_is_flat(small_body, soft):
    scene = SceneConfig.around((0, 0), 0.4, 32, gravity=(0.0, 0.0, 0.0))
    far = quick_motion((0.0, 0.0, 0.15), [("x", 0.01)], [0.02])
    dp = make_datapoint(small_body, far, "rectangle", soft, scene,
                        g.NoiseConfig(enabled=False), np.random.default_rng(0))
    M, _, _ = adj.landscape_sweep(("eta_t", "eta_m"), soft, Dataset([dp]), L.PRT_CD, scene,
                                  intervals=3)
    assert np.array_equal(M, np.zeros((3, 3)))


def test_landscape_rejects_bad_pair(soft):
    with pytest.raises(Exception):
        adj.landscape_sweep(("E", "E"), soft, [], L.PRT_CD, SceneConfig())
