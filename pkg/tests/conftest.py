from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from pqsystem.cli import load_config
from pqsystem.coupling import DiscreteProblem
from pqsystem.problem import Domain, ProblemSpec, Weight, WeightPiece

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def config(name: str) -> Path:
    return CONFIGS / f"{name}.yaml"


def quadratic_spec(weight: Weight, resolution=33, c=(1.0, 1.0), dim=1) -> ProblemSpec:
    domain = Domain.interval() if dim == 1 else Domain.rectangle()
    return ProblemSpec(2, 2, 2, 2, c1=c[0], c2=c[1], domain=domain, weight=weight, resolution=resolution)


def two_piece(resolution=33, c=(2.0, 2.0)) -> ProblemSpec:
    w = Weight(default=-1.0, pieces=(WeightPiece((0.7,), (1.0,), 1.0),))
    return quadratic_spec(w, resolution, c)


@pytest.fixture(scope="session")
def sign_changing():
    return DiscreteProblem(load_config(config("sign_changing_1d")))


@pytest.fixture(scope="session")
def nonnegative():
    return DiscreteProblem(load_config(config("nonnegative_1d")))


@pytest.fixture(scope="session")
def nonpositive():
    return DiscreteProblem(load_config(config("nonpositive_1d")))


@pytest.fixture(scope="session")
def zero_weight():
    return DiscreteProblem(quadratic_spec(Weight.constant(0.0), resolution=33))


@pytest.fixture(scope="session")
def small_sign_changing():
    return DiscreteProblem(two_piece(resolution=33))


# --- acceptance summary --------------------------------------------------------------

_CRITERIA: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = _criterion_of.get(report.nodeid)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "wasxfail"):
            outcome = "xfailed" if report.skipped else "xpassed"
        else:
            outcome = report.outcome
        _CRITERIA.setdefault(marker, []).append((report.nodeid.split("::")[-1], outcome))


_criterion_of: dict[str, int] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criterion_of[item.nodeid] = int(m.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        failed = [name for name, out in results if out in ("failed", "xpassed")]
        expected = [name for name, out in results if out == "xfailed"]
        status = "FAIL" if failed else "PASS"
        note = f" ({len(results)} checks"
        if expected:
            note += f"; expected failure recorded: {', '.join(expected)}"
        if failed:
            note += f"; failing: {', '.join(failed)}"
        terminalreporter.write_line(f"criterion {n:2d}: {status}{note})")
