"""Command-line entry point: simulate, make-synthetic, identify, landscape, plan."""
from __future__ import annotations

import argparse
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, load_config, parse_quantity
from .errors import DomainError, SimulationError
from .geometry import (REAL, SIM, Box, Cylinder, HeightMap, NoiseConfig,
                       PointSet, Sphere, FILLED, Trajectory, fill_particles, rasterize_heightmap,
                       resample_trajectory)
from .motions import MOTIONS, get_motion, quick_motion
from .sim import PARAM_NAMES, HAND_PICKED, ParticleSystem, PhysicsParams, SceneConfig, \
    make_effector, rollout


class CliError(Exception):
    pass


# ------------------------------------------------------------------ builders


def scene_from(cfg: RunConfig, center=None) -> SceneConfig:
    s = cfg["scene"]
    return SceneConfig.around(center if center is not None else s["center"], size=s["size"],
                              n=s["grid"], frame_dt=s["frame_dt"], n_substeps=s["n_substeps"],
                              cfl=s["cfl"], gravity=tuple(s["gravity"]),
                              table_height=s["table_height"], plasticity=s["plasticity"])


def body_from(cfg: RunConfig) -> PointSet:
    b = cfg["body"]
    rng = np.random.default_rng(b["seed"])
    c = b["center"]
    if b["shape"] == "box":
        shape = Box(c, b["half"])
    elif b["shape"] == "cylinder":
        shape = Cylinder((c[0], c[1], c[2] - 0.5 * b["height"]), b["radius"], b["height"])
    elif b["shape"] == "sphere":
        shape = Sphere(c, b["radius"])
    else:
        if not b["path"]:
            raise CliError("[body] shape = ply needs a path")
        return PointSet(io.read_ply(b["path"]), FILLED)
    return fill_particles(shape, b["density"], rng)


def _segments(text: str):
    """'z -6 mm, x -20 mm, rz 90 deg' -> [('z', -0.006), ...]"""
    out = []
    for part in (p.strip() for p in text.split(",") if p.strip()):
        axis, _, rest = part.partition(" ")
        if axis not in ("x", "y", "z", "rz"):
            raise CliError(f"[motion] segments: bad axis {axis!r} in {part!r}")
        dim = "angle" if axis == "rz" else "length"
        out.append((axis, parse_quantity(rest, dim, 1, "[motion] segments")[0]))
    return out


def trajectory_from(cfg: RunConfig, start=None) -> tuple[Trajectory, str]:
    """Sim-form trajectory and effector kind described by [motion]."""
    m = cfg["motion"]
    dt = cfg["scene"]["frame_dt"]
    start = m["start"] if start is None else start
    kind = m["effector"]
    if m["trajectory"]:
        real = io.read_trajectory(m["trajectory"], REAL)
        return resample_trajectory(real.shifted(np.asarray(start) - real.positions[0]), dt), \
            kind or "rectangle"
    name = m["name"]
    if name == "none":
        return Trajectory.empty(dt), kind or "rectangle"
    if name == "custom":
        segs = _segments(m["segments"])
        durs = [parse_quantity(d, "time", 1, "[motion] durations")[0]
                for d in m["durations"].split(",") if d.strip()]
        if len(durs) != len(segs) or not segs:
            raise CliError("[motion] custom needs one duration per segment")
        return quick_motion(start, segs, durs, dt), kind or "rectangle"
    try:
        mo = get_motion(name)
    except DomainError as e:
        raise CliError(str(e)) from None
    return mo.sim(start, m["real_seed"], dt), kind or mo.effector


def noise_from(cfg: RunConfig) -> NoiseConfig:
    n = cfg["noise"]
    return NoiseConfig(sigma=n["sigma"], offset=n["offset"], bottom_cut=n["bottom_cut"],
                       project_bottom=n["project_bottom"], voxel=n["voxel"],
                       table_height=cfg["scene"]["table_height"], enabled=n["enabled"])


def _skill(name: str, dt: float) -> Trajectory:
    if name in MOTIONS:
        return MOTIONS[name].sim((0.0, 0.0, 0.0), 0, dt)
    p = Path(name)
    if not p.exists():
        raise CliError(f"skill {name!r} is neither a motion name nor a trajectory file")
    return io.read_trajectory(p, SIM, dt)


# ------------------------------------------------------------------ manifest


def versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def prepare_out(out) -> Path:
    out = Path(out)
    if out.exists():
        raise CliError(f"output directory {out} already exists; refusing to overwrite")
    out.mkdir(parents=True)
    return out


def write_manifest(out: Path, cfg: RunConfig, command: str, extra=None) -> None:
    (out / "config.ini").write_text(cfg.serialize())
    io.write_json(out / "manifest.json", {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg["run"]["seed"],
        "deterministic": cfg["run"]["deterministic"],
        "versions": versions(),
        **(extra or {}),
    })


def _params_dict(p: PhysicsParams) -> dict:
    return {k: float(getattr(p, k)) for k in PARAM_NAMES}


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: RunConfig, out: Path, log=print) -> dict:
    params = cfg.params()
    params.validate()
    body = body_from(cfg)
    scene = scene_from(cfg)
    traj, kind = trajectory_from(cfg)
    ps = ParticleSystem.at_rest(body.points, 1.0 / cfg["body"]["density"])
    per_frame = cfg["output"]["per_frame"]
    res = rollout(ps, traj, params, scene, make_effector(kind), snapshots=per_frame)
    final, snaps = res if per_frame else (res, None)
    fmt = cfg["output"]["format"]

    def dump(path, pts):
        if fmt == "ply":
            io.write_ply(path.with_suffix(".ply"), pts)
        else:
            io.write_points_csv(path.with_suffix(".csv"), pts)

    if snaps is not None:
        (out / "frames").mkdir()
        for i, x in enumerate(snaps):
            dump(out / "frames" / f"frame_{i:04d}", x)
    dump(out / "initial", body.points)
    dump(out / "final", final.positions)
    origin = tuple(float(a) for a in body.points[:, :2].mean(axis=0))
    hm = rasterize_heightmap(final.positions, origin)
    io.write_heightmap_csv(out / "final_heightmap.csv", hm)
    io.write_pgm(out / "final_heightmap.pgm", hm)
    io.write_trajectory(out / "trajectory.csv", traj)
    info = {"frames": len(traj), "particles": len(body), "effector": kind,
            "substeps_per_frame": scene.substeps_for(params), "params": _params_dict(params)}
    log(f"simulated {len(traj)} frames of {len(body)} particles")
    return info


def cmd_make_synthetic(cfg: RunConfig, out: Path, log=print) -> dict:
    from .sysid import Dataset, make_datapoint
    body = body_from(cfg)
    theta = cfg.params()
    theta.validate()
    scene = scene_from(cfg)
    noise = noise_from(cfg)
    rng = np.random.default_rng(cfg["run"]["seed"])
    d = cfg["dataset"]
    data = Dataset()
    for rep in range(d["repeats"]):
        for mname in d["motions"]:
            for kind in d["effectors"]:
                sub = RunConfig(cfg.values)
                sub.set("motion", "name", mname)
                sub.set("motion", "effector", kind)
                traj, kind = trajectory_from(sub)
                name = f"{mname}-{kind}" + (f"-{rep}" if d["repeats"] > 1 else "")
                log(f"datapoint {name}: {len(traj)} frames")
                data.append(make_datapoint(body, traj, kind, theta, scene, noise, rng, name,
                                           cfg["body"]["density"]))
    data.save(out)
    from .sysid import write_params
    write_params(out / "theta_star.txt", theta)
    return {"theta_star": _params_dict(theta), "datapoints": [dp.name for dp in data]}


def _init_params(cfg: RunConfig) -> PhysicsParams:
    mode = cfg["optimizer"]["init"]
    if mode == "random":
        return PhysicsParams.random(np.random.default_rng(cfg["run"]["seed"]))
    if mode == "hand-picked":
        return HAND_PICKED
    return cfg.params()


def _load_dataset(path: str, what: str):
    from .sysid import Dataset
    if not path:
        raise CliError(f"[dataset] {what} is required")
    try:
        return Dataset.load(path)
    except DomainError as e:
        raise CliError(str(e)) from None


def cmd_identify(cfg: RunConfig, out: Path, log=print) -> dict:
    from .sysid import HISTORY_HEADER, history_rows, identify, write_params
    data = _load_dataset(cfg["dataset"]["path"], "path")
    val = _load_dataset(cfg["dataset"]["validation"], "validation") \
        if cfg["dataset"]["validation"] else None
    o = cfg["optimizer"]
    init = _init_params(cfg)
    scene = scene_from(cfg)

    def cb(rec):
        log(f"iteration {rec.iteration}: loss {rec.train_loss:.6g} "
            f"heightmap {rec.metrics['HEIGHTMAP']:.6g}")

    res = identify(data, o["loss"], init=init, iterations=o["iterations"],
                   seed=cfg["run"]["seed"], scene=scene, validation=val,
                   step_sizes=cfg.step_sizes(), box=cfg.box(),
                   allow_heightmap=o["allow_heightmap"], callback=cb)
    io.write_table(out / "history.csv", HISTORY_HEADER, history_rows(res))
    write_params(out / "best_params.txt", res.best)
    write_params(out / "final_params.txt", res.final.params)
    if o["heightmaps"]:
        (out / "heightmaps").mkdir()
        dp = (val or data)[0]
        for r in res.records():
            x = rollout(dp.initial_system(), dp.trajectory, r.params, scene, dp.effector())
            io.write_heightmap_csv(out / "heightmaps" / f"iter_{r.iteration:03d}.csv",
                                   dp.heightmap_of(x.positions))
    r0 = res.initial
    return {"best_iteration": res.best_iteration, "best": _params_dict(res.best),
            "init": _params_dict(init), "init_train_loss": r0.train_loss,
            "init_metrics": {k: float(v) for k, v in r0.metrics.items()}}


def cmd_landscape(cfg: RunConfig, out: Path, log=print) -> dict:
    from .adjoint import landscape_sweep
    data = _load_dataset(cfg["dataset"]["path"], "path")
    L = cfg["landscape"]
    scene = scene_from(cfg)
    files = []
    for spec in L["pairs"]:
        a, _, b = spec.partition(":")
        log(f"sweeping {a} x {b} ({L['intervals']}^2 rollouts)")
        try:
            M, va, vb = landscape_sweep((a, b), cfg.params(), data, L["loss"], scene,
                                        L["intervals"])
        except DomainError as e:
            raise CliError(f"[landscape] pairs {spec!r}: {e}") from None
        stem = f"landscape_{a}_{b}"
        io.write_table(out / f"{stem}.csv", [f"{a}/{b}"] + [float(y) for y in vb],
                       [[float(x)] + [float(v) for v in row] for x, row in zip(va, M)])
        if L["preview"]:
            io.write_pgm_array(out / f"{stem}.pgm", M)
        files.append(f"{stem}.csv")
    return {"matrices": files, "intervals": L["intervals"], "loss": L["loss"]}


def cmd_plan(cfg: RunConfig, out: Path, log=print) -> dict:
    from .planner import greedy_plan
    body = body_from(cfg)
    params = cfg.params()
    params.validate()
    P = cfg["plan"]
    dt = cfg["scene"]["frame_dt"]
    origin = tuple(float(a) for a in body.points[:, :2].mean(axis=0))
    if P["target"]:
        target = io.read_heightmap_csv(P["target"])
    else:
        # synthetic flattening: the initial heightmap capped at target_height
        hm0 = rasterize_heightmap(body.points, origin)
        target = HeightMap(np.minimum(hm0.values, P["target_height"]), origin, hm0.extent)
    skills = [_skill(s, dt) for s in P["skills"]]
    ps = ParticleSystem.at_rest(body.points, 1.0 / cfg["body"]["density"])
    plan = greedy_plan(ps, target, params, skills, P["n_actions"], scene_from(cfg, origin),
                       P["effector"], P["offset_unit"], log=log)
    rows = [[i + 1, a.skill or 0, a.offset[0], a.offset[1], float(a.start_z), float(l)]
            for i, (a, l) in enumerate(zip(plan.actions, plan.losses))]
    io.write_table(out / "plan.csv", ["step", "skill", "j", "k", "start_z_m", "loss_mm"], rows)
    io.write_table(out / "infeasible.csv", ["step", "candidate", "error"],
                   [list(r) for r in plan.infeasible])
    (out / "heightmaps").mkdir()
    top = max(float(target.values.max()), max(float(h.values.max()) for h in plan.heightmaps)
              if plan.heightmaps else 0.0, 1e-9)
    io.write_pgm(out / "heightmaps" / "target.pgm", target, top)
    io.write_heightmap_csv(out / "heightmaps" / "target.csv", target)
    io.write_pgm(out / "heightmaps" / "step_000.pgm", rasterize_heightmap(body.points, origin), top)
    for i, hm in enumerate(plan.heightmaps, 1):
        io.write_pgm(out / "heightmaps" / f"step_{i:03d}.pgm", hm, top)
        io.write_heightmap_csv(out / "heightmaps" / f"step_{i:03d}.csv", hm)
    io.write_ply(out / "final.ply", plan.final.positions)
    return {"initial_loss": plan.initial_loss, "losses": [float(x) for x in plan.losses],
            "infeasible": len(plan.infeasible)}


COMMANDS = {"simulate": cmd_simulate, "make-synthetic": cmd_make_synthetic,
            "identify": cmd_identify, "landscape": cmd_landscape, "plan": cmd_plan}


# ------------------------------------------------------------------ entry point


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpmsysid",
                                 description="Differentiable MPM system identification tools.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run configuration (defaults if omitted)")
        p.add_argument("--out", required=True, help="output directory (must not exist)")
        p.add_argument("--seed", type=_seed, help="overrides [run] seed")
        p.add_argument("--deterministic", type=_bool, default=None,
                       help="true (default) or false; the kernels are serial and always "
                            "deterministic, the flag is recorded in the manifest")
    return ap


def run(argv=None, log=print) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg.set("run", "command", args.command)
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.deterministic is not None:
            cfg.set("run", "deterministic", args.deterministic)
        out = prepare_out(args.out)
    except (CliError, DomainError, OSError) as e:
        print(f"mpmsysid {args.command}: error: {e}", file=sys.stderr)
        return 2
    try:
        info = COMMANDS[args.command](cfg, out, log)
        write_manifest(out, cfg, args.command, {"result": info})
    except (CliError, DomainError, SimulationError, OSError) as e:
        print(f"mpmsysid {args.command}: error: {e}", file=sys.stderr)
        if not any(out.iterdir()):
            out.rmdir()       # nothing written; leave no stale directory behind
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
