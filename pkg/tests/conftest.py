import numpy as np
import pytest

from asalvc.network import build_topology, incidence, simple_case
from asalvc.lindistflow import build_sensitivity

# lines reported by the acceptance suite, printed once at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def prepared(case):
    topo = build_topology(case)
    inc = incidence(case, topo)
    return topo, inc, build_sensitivity(case, topo, inc)


@pytest.fixture
def single_line():
    # desk case: r=0.01, x=0.02, p=-0.5, q_c=0.2, +/-1 pu VAr box
    return simple_case([0], [0.01], [0.02], p_load=[-0.5], q_load=[-0.2], q_bound=1.0)


@pytest.fixture
def chain():
    return simple_case([0, 1], [0.005, 0.005], [0.01, 0.01])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
