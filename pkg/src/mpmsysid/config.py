"""Run configuration: INI files whose dimensional values carry explicit units.

Every dimensional value is written as numbers followed by a unit, e.g.
``E = 30 MPa`` or ``gravity = 0 0 -9.81 m/s^2``. Values are stored in SI.
Unknown sections and keys are rejected. Serializing writes SI units with
exact float reprs, so parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass

from .errors import DomainError
from .losses import LOSS_KINDS, PRT_EMD
from .sim import HAND_PICKED, PARAM_BOX, PARAM_NAMES

# unit -> factor to SI, grouped by dimension; the first unit is the SI one
UNITS = {
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3},
    "time": {"s": 1.0, "ms": 1e-3},
    "pressure": {"Pa": 1.0, "kPa": 1e3, "MPa": 1e6, "GPa": 1e9},
    "density": {"kg/m^3": 1.0, "kg/m3": 1.0, "g/cm^3": 1e3, "g/cm3": 1e3},
    "accel": {"m/s^2": 1.0, "m/s2": 1.0},
    "count_density": {"1/m^3": 1.0, "1/m3": 1.0},
    "angle": {"rad": 1.0, "deg": math.pi / 180.0},
}
SI_UNIT = {dim: next(iter(u)) for dim, u in UNITS.items()}

COMMANDS = ("simulate", "make-synthetic", "identify", "landscape", "plan")
EFFECTORS = ("rectangle", "cylinder", "round")
PARAM_DIMS = {"E": "pressure", "nu": None, "rho": "density", "sigma_y": "pressure",
              "eta_t": None, "eta_m": None}


@dataclass(frozen=True)
class Field:
    kind: str                  # str | choice | int | bool | float | qty | vec | range | list
    default: object
    dim: str | None = None     # unit dimension for qty / vec / range (None = unitless)
    n: int = 0                 # vector length
    choices: tuple = ()


def _f(kind, default, dim=None, n=0, choices=()):
    return Field(kind, default, dim, n, choices)


SCHEMA = {
    "run": {
        "command": _f("choice", "simulate", choices=COMMANDS),
        "seed": _f("int", 0),
        "deterministic": _f("bool", True),
    },
    "scene": {
        "center": _f("vec", (0.0, 0.0), "length", 2),
        "size": _f("qty", 0.4, "length"),
        "grid": _f("int", 32),
        "frame_dt": _f("qty", 0.01, "time"),
        "n_substeps": _f("int", 100),
        "cfl": _f("float", 0.5),
        "gravity": _f("vec", (0.0, 0.0, -9.81), "accel", 3),
        "table_height": _f("qty", 0.0, "length"),
        "plasticity": _f("bool", True),
    },
    "body": {
        "shape": _f("choice", "box", choices=("box", "cylinder", "sphere", "ply")),
        "center": _f("vec", (0.0, 0.0, 0.012), "length", 3),
        "half": _f("vec", (0.02, 0.02, 0.012), "length", 3),
        "radius": _f("qty", 0.02, "length"),
        "height": _f("qty", 0.024, "length"),
        "path": _f("str", ""),
        "density": _f("qty", 4e6, "count_density"),
        "seed": _f("int", 7),
    },
    "material": {k: _f("qty" if PARAM_DIMS[k] else "float", getattr(HAND_PICKED, k),
                       PARAM_DIMS[k]) for k in PARAM_NAMES},
    "motion": {
        "name": _f("str", "poking-1"),
        "segments": _f("str", ""),
        "durations": _f("str", ""),
        "start": _f("vec", (0.0, 0.0, 0.026), "length", 3),
        "effector": _f("str", ""),
        "trajectory": _f("str", ""),
        "real_seed": _f("int", 0),
    },
    "noise": {
        "enabled": _f("bool", True),
        "sigma": _f("qty", 0.001, "length"),
        "offset": _f("qty", 0.003, "length"),
        "bottom_cut": _f("qty", 0.003, "length"),
        "voxel": _f("qty", 0.005, "length"),
        "project_bottom": _f("bool", True),
    },
    "dataset": {
        "path": _f("str", ""),
        "validation": _f("str", ""),
        "motions": _f("list", ("poking-1",)),
        "effectors": _f("list", ("rectangle",)),
        "repeats": _f("int", 1),
    },
    "optimizer": {
        "loss": _f("choice", PRT_EMD, choices=LOSS_KINDS),
        "iterations": _f("int", 100),
        "init": _f("choice", "random", choices=("random", "hand-picked", "material")),
        "allow_heightmap": _f("bool", False),
        "heightmaps": _f("bool", False),
        **{f"step_{k}": _f("qty" if PARAM_DIMS[k] else "float", v, PARAM_DIMS[k])
           for k, v in {"E": 4e6, "nu": 0.01, "rho": 10.0, "sigma_y": 5e5,
                        "eta_t": 0.01, "eta_m": 0.01}.items()},
    },
    "box": {k: _f("range", PARAM_BOX[k], PARAM_DIMS[k]) for k in PARAM_NAMES},
    "landscape": {
        "pairs": _f("list", ("E:nu", "sigma_y:rho", "eta_t:eta_m")),
        "intervals": _f("int", 30),
        "loss": _f("choice", PRT_EMD, choices=LOSS_KINDS),
        "preview": _f("bool", True),
    },
    "plan": {
        "n_actions": _f("int", 8),
        "skills": _f("list", ("poking-shifting-1", "poking-shifting-2")),
        "effector": _f("choice", "rectangle", choices=EFFECTORS),
        "offset_unit": _f("qty", 0.03, "length"),
        "target": _f("str", ""),
        "target_height": _f("qty", 0.012, "length"),
    },
    "output": {
        "per_frame": _f("bool", False),
        "format": _f("choice", "ply", choices=("ply", "csv")),
    },
}


def parse_quantity(text: str, dim: str | None, n: int = 1, where: str = "") -> tuple:
    """Numbers followed by one unit of the given dimension (none if unitless)."""
    tok = text.split()
    if dim is None:
        nums, unit = tok, None
    else:
        if len(tok) < 2:
            raise DomainError(f"{where}: {text!r} needs a unit ({', '.join(UNITS[dim])})")
        nums, unit = tok[:-1], tok[-1]
        if unit not in UNITS[dim]:
            raise DomainError(f"{where}: unit {unit!r} is not a {dim} unit "
                              f"({', '.join(UNITS[dim])})")
    if len(nums) != n:
        raise DomainError(f"{where}: expected {n} number(s), got {text!r}")
    try:
        vals = [float(x) for x in nums]
    except ValueError:
        raise DomainError(f"{where}: {text!r} is not numeric") from None
    if not all(math.isfinite(v) for v in vals):
        raise DomainError(f"{where}: non-finite value in {text!r}")
    f = UNITS[dim][unit] if dim else 1.0
    return tuple(v * f for v in vals)


def _parse_value(fld: Field, text: str, where: str):
    text = text.strip()
    if fld.kind == "str":
        return text
    if fld.kind == "choice":
        if text not in fld.choices:
            raise DomainError(f"{where}: {text!r} is not one of {', '.join(fld.choices)}")
        return text
    if fld.kind == "int":
        try:
            return int(text)
        except ValueError:
            raise DomainError(f"{where}: {text!r} is not an integer") from None
    if fld.kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise DomainError(f"{where}: {text!r} is not a boolean")
    if fld.kind == "float":
        return parse_quantity(text, None, 1, where)[0]
    if fld.kind == "qty":
        return parse_quantity(text, fld.dim, 1, where)[0]
    if fld.kind == "vec":
        return parse_quantity(text, fld.dim, fld.n, where)
    if fld.kind == "range":
        lo, hi = parse_quantity(text, fld.dim, 2, where)
        if not lo <= hi:
            raise DomainError(f"{where}: range {text!r} has min > max")
        return (lo, hi)
    if fld.kind == "list":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    raise AssertionError(fld.kind)


def _format_value(fld: Field, v) -> str:
    if fld.kind in ("str", "choice"):
        return v
    if fld.kind == "int":
        return str(v)
    if fld.kind == "bool":
        return "true" if v else "false"
    unit = f" {SI_UNIT[fld.dim]}" if fld.dim else ""
    if fld.kind in ("float", "qty"):
        return f"{float(v)!r}{unit}"
    if fld.kind in ("vec", "range"):
        return " ".join(repr(float(x)) for x in v) + unit
    if fld.kind == "list":
        return ", ".join(v)
    raise AssertionError(fld.kind)


class RunConfig:
    """Resolved configuration: every schema key has a value (defaults filled)."""

    def __init__(self, values: dict | None = None):
        self.values = {s: {k: f.default for k, f in keys.items()} for s, keys in SCHEMA.items()}
        for s, kv in (values or {}).items():
            for k, v in kv.items():
                _check_key(s, k)
                self.values[s][k] = v

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        _check_key(section, key)
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        _check_key(section, key)
        self.values[section][key] = value

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def serialize(self) -> str:
        out = []
        for s, keys in SCHEMA.items():
            out.append(f"[{s}]")
            for k, fld in keys.items():
                out.append(f"{k} = {_format_value(fld, self.values[s][k])}")
            out.append("")
        return "\n".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def params(self):
        from .sim import PhysicsParams
        return PhysicsParams(**self.values["material"])

    def step_sizes(self) -> dict:
        return {k: self.values["optimizer"][f"step_{k}"] for k in PARAM_NAMES}

    def box(self) -> dict:
        return dict(self.values["box"])


def _check_key(section: str, key: str) -> None:
    if section not in SCHEMA:
        raise DomainError(f"unknown config section [{section}] "
                          f"(known: {', '.join(SCHEMA)})")
    if key not in SCHEMA[section]:
        raise DomainError(f"unknown key {key!r} in [{section}] "
                          f"(known: {', '.join(SCHEMA[section])})")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                   default_section="__none__")
    cp.optionxform = str   # keys are case sensitive (E)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise DomainError(f"{source}: {e}") from None
    values = {}
    for s in cp.sections():
        for k, raw in cp.items(s):
            _check_key(s, k)
            values.setdefault(s, {})[k] = _parse_value(SCHEMA[s][k], raw, f"{source} [{s}] {k}")
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise DomainError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))
