import numpy as np
import pytest

from mhdlab.dynamics import SolverConfig
from mhdlab.fourier_core import DissipationParams
from mhdlab.levy_noise import NoiseConfig, SubordinatorModel

FOUR_MODES = [(0, 1), (0, -1), (1, 1), (-1, -1)]


def make_solver(N=4, amp=0.1, nu=1.0, alpha=1.25, dt=0.01, integrator="exponential-euler", c=0.25, **kw):
    noise = NoiseConfig.from_symmetric(FOUR_MODES, {(0, 1): (amp, amp), (1, 1): (amp, amp)})
    sub = SubordinatorModel.tempered_stable(c, 0.5, 1.0) if c else None
    return SolverConfig(N=N, dissipation=DissipationParams(nu, nu, alpha, alpha), noise=noise, dt=dt,
                        integrator=integrator, subordinator=sub, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


@pytest.fixture
def solver():
    return make_solver()


# one PASS/FAIL line per acceptance criterion, printed after the run

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if call.excinfo is None else "FAIL"
    if call.excinfo is not None and not detail:
        detail = call.excinfo.exconly().splitlines()[0][:160]
    _CRITERIA[n] = f"{status} criterion {n:>2} {title}" + (f": {detail}" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
