import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mpmsysid import geometry as g
from mpmsysid import sim

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria (slow)")


@pytest.fixture(scope="session")
def small_body():
    """~160 particles, a 40 x 40 x 24 mm box resting on the table."""
    return g.fill_particles(g.Box((0.0, 0.0, 0.012), (0.02, 0.02, 0.012)),
                            rng=np.random.default_rng(7))


@pytest.fixture(scope="session")
def scene():
    return sim.SceneConfig.around((0.0, 0.0), size=0.4, n=32)


@pytest.fixture(scope="session")
def soft():
    """Soft parameters (few substeps) inside the boxes."""
    return sim.PhysicsParams(E=1.2e7, nu=0.3, rho=1300.0, sigma_y=1e6, eta_t=0.5, eta_m=0.6)


def rotation(rng):
    q = rng.normal(size=4)
    from scipy.spatial.transform import Rotation
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


# ------------------------------------------------------------------ acceptance verdicts

VERDICTS = []


@pytest.fixture
def verdict():
    """verdict(n, ok, detail): records one PASS/FAIL line for criterion n."""
    def note(n, ok, detail=""):
        line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append((n, line))
        print(line)
        return ok
    return note


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
