"""Plain-text artifact formats: PLY point clouds, CSV tables and PGM heightmaps."""
from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .errors import DomainError
from .geometry import REAL, SIM, HeightMap, Trajectory

_PLY_TYPES = {"double": "<f8", "float64": "<f8", "float": "<f4", "float32": "<f4"}


def write_ply(path, points, binary: bool = True) -> None:
    """PLY with float64 x/y/z; binary little endian by default, ASCII reprs otherwise.
    Both round-trip exactly."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    fmt = "binary_little_endian" if binary else "ascii"
    head = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f8").tobytes())
        else:
            for p in pts:
                fh.write((" ".join(repr(float(a)) for a in p) + "\n").encode("ascii"))


def write_points_csv(path, points) -> None:
    write_table(path, ["x", "y", "z"], [[float(a) for a in p] for p in np.asarray(points)])


def read_ply(path) -> np.ndarray:
    """x, y, z of the vertex element; ASCII or binary little endian."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise DomainError(f"{path}: not a PLY file")
        fmt, n, props, in_vertex = None, 0, [], False
        while True:
            line = fh.readline()
            if not line:
                raise DomainError(f"{path}: truncated PLY header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append((tok[-1], tok[1]))
            elif tok[0] == "end_header":
                break
        names = [p[0] for p in props]
        if not {"x", "y", "z"} <= set(names):
            raise DomainError(f"{path}: vertex element lacks x/y/z")
        if fmt == "ascii":
            rows = [fh.readline().split() for _ in range(n)]
            arr = np.array(rows, dtype=np.float64).reshape(n, len(names))
            return np.ascontiguousarray(arr[:, [names.index(a) for a in "xyz"]])
        if fmt == "binary_little_endian":
            try:
                dt = np.dtype([(nm, _PLY_TYPES[ty]) for nm, ty in props])
            except KeyError as e:
                raise DomainError(f"{path}: unsupported property type {e}") from None
            rec = np.frombuffer(fh.read(dt.itemsize * n), dtype=dt, count=n)
            return np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
        raise DomainError(f"{path}: unsupported PLY format {fmt!r}")


TRAJ_HEADER = ["t", "x", "y", "z", "qx", "qy", "qz", "qw"]


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_HEADER)
        for t, p, q in zip(traj.times, traj.positions, traj.orientations):
            w.writerow([repr(float(t))] + [repr(float(a)) for a in p] + [repr(float(a)) for a in q])


def read_trajectory(path, form: str = SIM, dt: float = 0.0) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRAJ_HEADER:
        raise DomainError(f"{path}: expected header {','.join(TRAJ_HEADER)}")
    a = np.array(rows[1:], dtype=np.float64).reshape(-1, 8)
    if form not in (REAL, SIM):
        raise DomainError(f"unknown trajectory form {form!r}")
    return Trajectory(a[:, 0], a[:, 1:4], a[:, 4:8], form, dt)


def write_heightmap_csv(path, hm: HeightMap) -> None:
    """Cell heights in mm, one row per x cell; origin/extent in a comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# origin_m={float(hm.origin[0])!r},{float(hm.origin[1])!r} extent_m={float(hm.extent)!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in hm.values * 1000.0:
            w.writerow([repr(float(v)) for v in row])


def read_heightmap_csv(path) -> HeightMap:
    with open(path) as fh:
        head = fh.readline()
        if not head.startswith("# origin_m="):
            raise DomainError(f"{path}: missing heightmap header")
        kv = dict(tok.split("=") for tok in head[2:].split())
        ox, oy = (float(v) for v in kv["origin_m"].split(","))
        vals = np.array(list(csv.reader(fh)), dtype=np.float64) / 1000.0
    return HeightMap(vals, (ox, oy), float(kv["extent_m"]))


def write_pgm(path, hm: HeightMap, top: float | None = None) -> None:
    """16-bit binary PGM, black = 0, white = `top` metres (default: the max)."""
    v = np.asarray(hm.values, dtype=np.float64)
    top = float(top if top is not None else max(v.max(), 1e-9))
    write_pgm_array(path, v, 0.0, top)


def write_pgm_array(path, values, lo: float | None = None, hi: float | None = None) -> None:
    """Any finite-or-NaN matrix scaled linearly from lo (black) to hi (white); NaN is black."""
    v = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(v)
    lo = float(lo if lo is not None else (v[ok].min() if ok.any() else 0.0))
    hi = float(hi if hi is not None else (v[ok].max() if ok.any() else 1.0))
    span = hi - lo if hi > lo else 1.0
    img = np.where(ok, (np.where(ok, v, lo) - lo) / span, 0.0)
    img = np.clip(np.round(img * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise DomainError(f"{path}: not a binary PGM")
    w, h, mx = (int(g) for g in m.groups())
    dt = ">u2" if mx > 255 else "u1"
    return np.frombuffer(data, dtype=dt, count=w * h, offset=m.end()).reshape(h, w).astype(np.int64)


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
