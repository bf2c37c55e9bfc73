import numpy as np
import pytest

from ahcc.chart_fields import build_grid
from ahcc.constraints import SourceRecipe, make_source
from ahcc.solver import SolverConfig, ift_iterate, newton_fd

EPS = 1e-3
SWEEP = (2e-4, 5e-4, 1e-3)

_CRITERIA = {}


def record(number, title, passed, detail):
    _CRITERIA[number] = (title, bool(passed), detail)


@pytest.fixture(scope="session")
def criteria():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k:>2} "
                                    f"{title}: {detail}")


@pytest.fixture(scope="session")
def grid33():
    return build_grid(3, 33, 0.9, 4)


@pytest.fixture(scope="session")
def grid65():
    return build_grid(3, 65, 0.9, 4)


@pytest.fixture(scope="session")
def grid17():
    return build_grid(3, 17, 0.9, 4)


def _source(grid, eps):
    return make_source(SourceRecipe("rho-power", eps, 1.5, 0), grid)


@pytest.fixture(scope="session")
def source33(grid33):
    return _source(grid33, EPS)


@pytest.fixture(scope="session")
def ift_solution(source33):
    return ift_iterate(source33, SolverConfig(mode="ift-picard"))


@pytest.fixture(scope="session")
def newton_solution(source33):
    return newton_fd(source33, SolverConfig(mode="newton-fd"))


@pytest.fixture(scope="session")
def eps_sweep(grid33, ift_solution):
    out = {EPS: ift_solution}
    for eps in SWEEP:
        if eps not in out:
            out[eps] = ift_iterate(_source(grid33, eps), SolverConfig())
    return out


@pytest.fixture(scope="session")
def small_solution(grid17):
    src = _source(grid17, EPS)
    state, rep = ift_iterate(src, SolverConfig())
    return src, state, rep


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
