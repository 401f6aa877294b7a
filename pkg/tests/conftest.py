import numpy as np
import pytest

from semismd.synthrig import default_rig, generate_frameset

ORACLE_SEEDS = tuple(range(10))


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def framesets(rig):
    """The ten seeded frame-sets the warping and optimality oracles run on."""
    return [generate_frameset(s, rig) for s in ORACLE_SEEDS]


@pytest.fixture(scope="session")
def frameset(framesets):
    return framesets[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def report(request):
    """Print an acceptance line immediately and repeat it in the run summary."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(line):
        _ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
