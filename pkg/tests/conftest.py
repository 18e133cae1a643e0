import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qlab.conformal import ConformalMetric, QSpec, log_potential_u, sharp_constant
from qlab.grid import build_grid

settings.register_profile("qlab", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("qlab")


@pytest.fixture(scope="session")
def flat2():
    g = build_grid(2, 2.0, 65)
    return ConformalMetric.from_u(g, np.zeros(g.shape))


@pytest.fixture(scope="session")
def bump2():
    g = build_grid(2, 2.0, 65)
    q = QSpec.bumps(2, [((0.0, 0.0), 0.5 * sharp_constant(2), 0.3)])
    return log_potential_u(q, g)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    rows = request.config.stash.setdefault(_ACCEPTANCE, [])
    state = {"done": False}

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        state["done"] = True
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        rows.append((number, line))
        print(line)
        assert ok, line

    yield record
    if not state["done"]:
        num = request.node.get_closest_marker("criterion").args[0]
        rows.append((num, f"criterion {num:>2} FAIL  {request.node.name}: raised before a verdict"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_ACCEPTANCE, [])
    if rows:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(rows, key=lambda r: r[0]):
            terminalreporter.write_line(line)
