import math

import pytest
from hypothesis import given, strategies as st

from mpmsysid.config import SCHEMA, UNITS, RunConfig, load_config, parse_config, parse_quantity
from mpmsysid.errors import DomainError
from mpmsysid.sim import HAND_PICKED


def test_defaults():
    cfg = parse_config("")
    assert cfg.params() == HAND_PICKED
    assert cfg.get("scene", "gravity") == (0.0, 0.0, -9.81)
    assert cfg.get("plan", "offset_unit") == 0.03


@pytest.mark.parametrize("text,dim,si", [
    ("30 MPa", "pressure", 3e7),
    ("1.5 GPa", "pressure", 1.5e9),
    ("250 kPa", "pressure", 2.5e5),
    ("12 mm", "length", 0.012),
    ("3 cm", "length", 0.03),
    ("10 ms", "time", 0.01),
    ("1.3 g/cm^3", "density", 1300.0),
    ("180 deg", "angle", math.pi),
])
def test_unit_conversion(text, dim, si):
    assert parse_quantity(text, dim)[0] == pytest.approx(si, rel=1e-15)


def test_parse_example():
    cfg = parse_config("""
[material]
E = 30 MPa        # Young's modulus
nu = 0.3
rho = 1.3 g/cm^3
[scene]
gravity = 0 0 -9.81 m/s2
""")
    assert cfg.params().E == 3e7 and cfg.params().rho == pytest.approx(1300.0)
    assert cfg.get("scene", "gravity") == (0.0, 0.0, -9.81)


@pytest.mark.parametrize("text", [
    "[material]\nE = 30\n",                   # missing unit
    "[material]\nE = 30 mm\n",                # wrong dimension
    "[material]\nnu = 0.3 Pa\n",              # unitless with a unit
    "[material]\nmass = 1 kg/m^3\n",          # unknown key
    "[materials]\nE = 1 Pa\n",                # unknown section
    "[scene]\ngravity = 0 -9.81 m/s^2\n",     # wrong length
    "[scene]\ngrid = 3.5\n",
    "[run]\ncommand = fly\n",
    "[box]\nE = 3e8 1e7 Pa\n",                # min > max
    "[material]\nE = nan Pa\n",
    "no section\n",
])
def test_rejects(text):
    with pytest.raises(DomainError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(DomainError):
        load_config(tmp_path / "nope.ini")


finite = st.floats(-1e9, 1e9, allow_nan=False, allow_infinity=False)


@st.composite
def configs(draw):
    values = {}
    for s, keys in SCHEMA.items():
        for k, f in keys.items():
            if not draw(st.booleans()):
                continue
            if f.kind == "int":
                v = draw(st.integers(0, 10 ** 6))
            elif f.kind == "bool":
                v = draw(st.booleans())
            elif f.kind in ("float", "qty"):
                v = draw(finite)
            elif f.kind == "vec":
                v = tuple(draw(finite) for _ in range(f.n))
            elif f.kind == "range":
                a, b = sorted((draw(finite), draw(finite)))
                v = (a, b)
            elif f.kind == "choice":
                v = draw(st.sampled_from(f.choices))
            elif f.kind == "list":
                v = tuple(draw(st.lists(st.from_regex(r"[a-z][a-z0-9:-]{0,8}", fullmatch=True),
                                        min_size=1, max_size=3)))
            else:
                v = draw(st.from_regex(r"[A-Za-z0-9_./-]{0,12}", fullmatch=True))
            values.setdefault(s, {})[k] = v
    return RunConfig(values)


@given(configs())
def test_round_trip(cfg):
    text = cfg.serialize()
    back = parse_config(text)
    assert back == cfg
    assert back.serialize() == text and back.digest() == cfg.digest()


def test_units_have_si_first():
    for dim, table in UNITS.items():
        assert next(iter(table.values())) == 1.0
