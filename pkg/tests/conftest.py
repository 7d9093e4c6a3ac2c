import numpy as np
import pytest

from mvcm.data import validate_dataset
from mvcm.simulation import SimulationDesign, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def example_data():
    return generate_dataset(SimulationDesign(n=80, M=40, c=0.4), 11)


def noiseless_dataset(coef_fn, n=30, M=40, seed=0, p_extra=2):
    """Curves y_i(s) = x_i^T coef_fn(s) with an intercept and ``p_extra`` random covariates."""
    rng = np.random.default_rng(seed)
    grid = np.sort(rng.uniform(0, 1, M))
    x = np.column_stack([np.ones(n), rng.normal(size=(n, p_extra))])
    B = coef_fn(grid)                       # (J, p, M)
    y = np.einsum("ip,jpm->ijm", x, B)
    return validate_dataset(grid, y, x)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {name}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
