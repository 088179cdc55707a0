import pytest

from robustpower.optimizer import SolveOptions, solve_m2
from robustpower.primitives import benchmark_farm


@pytest.fixture(scope="session")
def farm():
    return benchmark_farm(delta=4.0, epsilon=0.01)


@pytest.fixture(scope="session")
def farm_solution(farm):
    return solve_m2(farm, SolveOptions(restarts=32, seed=0))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.VERDICTS:
            terminalreporter.write_line(line)
