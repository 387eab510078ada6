import csv
import json

import numpy as np
import pytest

from mpmsysid import io
from mpmsysid.cli import run
from mpmsysid.motions import quick_motion
from mpmsysid.sysid import Dataset

SHORT = """
[material]
E = 12 MPa
nu = 0.3
[motion]
name = custom
segments = z -6 mm, z 6 mm
durations = 30 ms, 30 ms
"""


def call(tmp_path, command, name, config="", *flags):
    path = tmp_path / f"{name}.ini"
    path.write_text(config)
    return run([command, "--config", str(path), "--out", str(tmp_path / name), *flags],
               log=lambda *_: None)


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------ simulate


def test_simulate_without_motion_echoes_initial(tmp_path):
    assert call(tmp_path, "simulate", "s", "[motion]\nname = none\n") == 0
    d = tmp_path / "s"
    assert np.array_equal(io.read_ply(d / "initial.ply"), io.read_ply(d / "final.ply"))
    man = json.loads((d / "manifest.json").read_text())
    assert man["result"]["frames"] == 0 and man["command"] == "simulate"
    assert (d / "config.ini").read_text().startswith("[run]\ncommand = simulate")


def test_simulate_poking_frames(tmp_path):
    cfg = "[material]\nE = 12 MPa\nnu = 0.3\n[output]\nper_frame = true\nformat = csv\n"
    assert call(tmp_path, "simulate", "s", cfg) == 0
    d = tmp_path / "s"
    assert len(list((d / "frames").glob("frame_*.csv"))) == 88     # initial + 87 frames
    assert len(rows(d / "trajectory.csv")) == 1 + 87
    assert json.loads((d / "manifest.json").read_text())["result"]["frames"] == 87
    assert io.read_heightmap_csv(d / "final_heightmap.csv").values.shape == (32, 32)


def test_simulate_rejects_out_of_box_params(tmp_path, capsys):
    assert call(tmp_path, "simulate", "s", "[material]\nnu = 0.6\n") == 2
    assert "nu" in capsys.readouterr().err
    assert not (tmp_path / "s").exists()


def test_bad_config_exits_2(tmp_path, capsys):
    assert call(tmp_path, "simulate", "s", "[material]\nE = 30\n") == 2
    assert "unit" in capsys.readouterr().err


def test_refuses_to_overwrite(tmp_path, capsys):
    (tmp_path / "s").mkdir()
    (tmp_path / "s" / "keep.txt").write_text("x")
    assert call(tmp_path, "simulate", "s", "[motion]\nname = none\n") == 2
    assert "exists" in capsys.readouterr().err
    assert (tmp_path / "s" / "keep.txt").read_text() == "x"


def test_seed_flag_validation(tmp_path):
    with pytest.raises(SystemExit):
        call(tmp_path, "simulate", "s", "", "--seed", "-1")
    with pytest.raises(SystemExit):
        call(tmp_path, "simulate", "t", "", "--deterministic", "maybe")


# ------------------------------------------------------------------ make-synthetic / identify


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    assert call(root, "make-synthetic", "data", SHORT + "[dataset]\nmotions = custom\n") == 0
    return root / "data"


def test_synthetic_layout(synthetic):
    dirs = sorted(p.name for p in synthetic.iterdir() if p.is_dir())
    assert dirs == ["000_custom-rectangle"]
    dp = synthetic / dirs[0]
    for f in ("initial_filled.ply", "target_cloud.ply", "target_filled.ply", "trajectory.csv",
              "target_heightmap.csv", "meta.json"):
        assert (dp / f).exists()
    assert (synthetic / "theta_star.txt").exists()
    assert (synthetic / "manifest.json").exists()


def test_synthetic_mix_and_exact_surface(tmp_path):
    cfg = SHORT + """
[noise]
enabled = false
bottom_cut = 0 m
project_bottom = false
voxel = 0 m
[dataset]
motions = custom, none
effectors = rectangle, cylinder, round
repeats = 2
"""
    assert call(tmp_path, "make-synthetic", "d", cfg) == 0
    data = Dataset.load(tmp_path / "d")
    assert len(data) == 12
    assert sorted({dp.effector_kind for dp in data}) == ["cylinder", "rectangle", "round"]
    # no motion and no noise: the observed cloud is a subset of the resting body
    still = [dp for dp in data if len(dp.trajectory) == 0]
    assert len(still) == 6
    body = {tuple(p) for p in still[0].initial.points}
    assert all(tuple(p) in body for p in still[0].target_cloud.points)


def test_identify_history(tmp_path, synthetic):
    cfg = f"[dataset]\npath = {synthetic}\n[optimizer]\niterations = 3\nloss = PRT-CD\n"
    assert call(tmp_path, "identify", "i", cfg) == 0
    h = rows(tmp_path / "i" / "history.csv")
    assert h[0][:2] == ["iteration", "E"] and len(h) == 1 + 3
    assert [r[0] for r in h[1:]] == ["1", "2", "3"]
    man = json.loads((tmp_path / "i" / "manifest.json").read_text())
    assert set(man["result"]["init"]) == {"E", "nu", "rho", "sigma_y", "eta_t", "eta_m"}
    assert (tmp_path / "i" / "best_params.txt").exists()


def test_identify_seeds_differ(tmp_path, synthetic):
    cfg = f"[dataset]\npath = {synthetic}\n[optimizer]\niterations = 1\nloss = PCD-CD\n"
    hist = []
    for s in ("1", "2", "3"):
        assert call(tmp_path, "identify", f"i{s}", cfg, "--seed", s) == 0
        hist.append(rows(tmp_path / f"i{s}" / "history.csv")[1])
    assert len({tuple(h) for h in hist}) == 3
    assert call(tmp_path, "identify", "again", cfg, "--seed", "2") == 0
    assert rows(tmp_path / "again" / "history.csv")[1] == hist[1]


def test_identify_needs_dataset(tmp_path, capsys):
    assert call(tmp_path, "identify", "i", "") == 2
    assert "dataset" in capsys.readouterr().err


# ------------------------------------------------------------------ landscape


def test_landscape_cells(tmp_path, synthetic):
    cfg = f"[dataset]\npath = {synthetic}\n[landscape]\npairs = E:nu\nintervals = 2\nloss = PCD-CD\n"
    assert call(tmp_path, "landscape", "l", cfg) == 0
    t = rows(tmp_path / "l" / "landscape_E_nu.csv")
    assert t[0][0] == "E/nu" and len(t) == 3 and all(len(r) == 3 for r in t)
    M = np.array([[float(v) for v in r[1:]] for r in t[1:]])
    assert abs(M.sum()) <= 1e-9 * np.abs(M).max()
    assert (tmp_path / "l" / "landscape_E_nu.pgm").exists()


def test_landscape_friction_flat_without_contact(tmp_path):
    data = SHORT.replace("segments = z -6 mm, z 6 mm", "segments = x 5 mm, x -5 mm")
    data += "[scene]\ngravity = 0 0 0 m/s^2\n"
    far = data.replace("[motion]", "[motion]\nstart = 0 0 150 mm")
    assert call(tmp_path, "make-synthetic", "d", far + "[dataset]\nmotions = custom\n") == 0
    cfg = far + f"[dataset]\npath = {tmp_path / 'd'}\n[landscape]\npairs = eta_t:eta_m\n" \
        "intervals = 5\nloss = PRT-CD\npreview = false\n"
    assert call(tmp_path, "landscape", "l", cfg) == 0
    t = rows(tmp_path / "l" / "landscape_eta_t_eta_m.csv")
    M = np.array([[float(v) for v in r[1:]] for r in t[1:]])
    assert M.shape == (5, 5) and np.array_equal(M, np.zeros((5, 5)))
    assert not (tmp_path / "l" / "landscape_eta_t_eta_m.pgm").exists()


# ------------------------------------------------------------------ plan


def test_plan_toward_initial_is_empty(tmp_path):
    skill = tmp_path / "poke.csv"
    io.write_trajectory(skill, quick_motion((0, 0, 0.002), [("z", -0.006), ("z", 0.006)],
                                            [0.03, 0.03]))
    # a target taller than the body equals its initial heightmap
    cfg = SHORT + f"[plan]\nn_actions = 8\nskills = {skill}\ntarget_height = 100 mm\n"
    assert call(tmp_path, "plan", "p", cfg) == 0
    t = rows(tmp_path / "p" / "plan.csv")
    assert t[0] == ["step", "skill", "j", "k", "start_z_m", "loss_mm"]
    assert len(t) == 1 + 8
    assert all(r[1] == "0" and float(r[5]) == 0.0 for r in t[1:])
    hm = sorted(p.name for p in (tmp_path / "p" / "heightmaps").glob("step_*.pgm"))
    assert hm[0] == "step_000.pgm" and hm[-1] == "step_008.pgm"
    assert (tmp_path / "p" / "final.ply").exists()
