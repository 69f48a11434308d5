import numpy as np
import pytest

from porofix.app import AppConfig, manufactured_scenario
from porofix.mesh import Mesh, structured_square


def perturbed_square(n: int, amount: float = 0.2, seed: int = 0) -> Mesh:
    """Structured square with interior vertices jittered (cells stay valid)."""
    base = structured_square(n)
    rng = np.random.default_rng(seed)
    v = base.vertices.copy()
    inner = ~base.boundary_vertex
    v[inner] += rng.uniform(-amount, amount, size=(inner.sum(), 2)) / n
    return Mesh(v, base.cells, None, base.boundary_tags())


def manufactured(n: int = 4, **kw):
    return manufactured_scenario(AppConfig(n=n, **kw))


@pytest.fixture
def small_mesh():
    return perturbed_square(3)


@pytest.fixture(scope="session")
def manu4():
    return manufactured(4)


# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict = {}


def report(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
