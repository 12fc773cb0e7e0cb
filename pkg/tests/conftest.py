import numpy as np
import pytest

from deformctl.objective import ObjectiveConfig, SubRegionPartition, Target
from deformctl.plant import Plant, make_reachable_target, mannequin_model, reduced_model
from deformctl.solver import ShapeProblem

A_STAR4 = np.array([12.0, 18.0, 10.0, 15.0])
A_STAR2 = np.array([13.0, 8.0])

_ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the terminal summary (also printed inline)."""
    def _report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


@pytest.fixture(scope="session")
def model4():
    return mannequin_model()


@pytest.fixture(scope="session")
def model2():
    return reduced_model()


@pytest.fixture(scope="session")
def reachable4(model4):
    return make_reachable_target(model4, A_STAR4)


@pytest.fixture(scope="session")
def reachable2(model2):
    return make_reachable_target(model2, A_STAR2)


def make_problem(model, mesh, seed=0, normal_weight=3e-3, **kw):
    partition = SubRegionPartition.mannequin() if model.k == 4 else SubRegionPartition.halves()
    return ShapeProblem(Plant(model, seed), Target(mesh), ObjectiveConfig(normal_weight, partition), **kw)
