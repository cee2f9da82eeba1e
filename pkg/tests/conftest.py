import pytest

from mcxtfc.cvsim6 import CvSimParams, PulmResistanceModel, periodic_trace


@pytest.fixture(scope="session")
def params():
    return CvSimParams()


@pytest.fixture(scope="session")
def trace(params):
    """Five recorded beats of the default model sampled at 1 kHz."""
    return periodic_trace(params, PulmResistanceModel.linear(), cycles=5, sample_rate=1000)


@pytest.fixture(scope="session")
def short_trace(params):
    """Two recorded beats at 200 Hz."""
    return periodic_trace(params, PulmResistanceModel.linear(), cycles=2, sample_rate=200)


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(n, ok, detail):
        lines[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
