import numpy as np
import pytest

from qf.kernels import detect_features, use_kernels


@pytest.fixture(params=["auto", "scalar"])
def dispatch(request):
    """Run the test once with host dispatch and once forced scalar."""
    with use_kernels(detect_features(request.param)) as ks:
        yield ks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line(capsys):
    """Record (and echo) one pass/fail line for an acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str = "", soft: bool = False):
        status = "PASS" if passed else ("FLAG" if soft else "FAIL")
        line = f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
