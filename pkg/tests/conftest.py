import numpy as np
import pytest

from cryosort.align import FrequencyBand, OrientationGrid, ReferenceBank
from cryosort.volume import CtfParams, make_phantom

PIXEL = 2.5


@pytest.fixture(scope="session")
def ctf():
    return CtfParams(pixel_size=PIXEL)


@pytest.fixture(scope="session")
def phantom64():
    return make_phantom(7, 12, True, 64, PIXEL)


@pytest.fixture(scope="session")
def phantom32():
    return make_phantom(3, 8, True, 32, PIXEL)


@pytest.fixture(scope="session")
def coarse_grid():
    return OrientationGrid.fibonacci(15.0)


@pytest.fixture(scope="session")
def bank32(phantom32, ctf, coarse_grid):
    return ReferenceBank(phantom32, ctf, coarse_grid, FrequencyBand())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------------------ acceptance verdicts

ACCEPTANCE_LINES: dict[int, str] = {}


class Verdict:
    """Collects the checks of one acceptance criterion."""

    def __init__(self):
        self.checks: list[tuple[str, bool]] = []

    def check(self, text: str, passed) -> bool:
        self.checks.append((text, bool(passed)))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok in self.checks)


@pytest.fixture
def verdict(request):
    """Record PASS/FAIL for the criterion numbered in the test name (``test_criterion_NN_...``)."""
    number = int(request.node.name.split("_")[2])
    v = Verdict()
    yield v
    detail = "; ".join(f"{t} [{'ok' if ok else 'FAILED'}]" for t, ok in v.checks) \
        or "no verdict (error before checks)"
    line = f"{'PASS' if v.passed else 'FAIL'} criterion {number:2d}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
