import numpy as np
import pytest

from logsae.model_core import AreaFrame, PopulationLayout


def make_layout(seed=0, D=5, n_range=(1, 5), oos_range=(0, 6), p=2, with_y=True, theta=(0.3, 0.6), beta=None):
    """Small unbalanced layout with an intercept and p-1 normal covariates."""
    rng = np.random.default_rng(seed)
    beta = np.linspace(0.5, -0.2, p) if beta is None else np.asarray(beta, float)
    areas = []
    for d in range(D):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        m = int(rng.integers(oos_range[0], oos_range[1] + 1))
        X = np.column_stack([np.ones(n + m), rng.normal(size=(n + m, p - 1))])
        y = None
        if with_y:
            u = rng.normal(0, np.sqrt(theta[0]))
            y = X[:n] @ beta + u + rng.normal(0, np.sqrt(theta[1]), n)
        areas.append(AreaFrame(f"a{d}", X[:n], X[n:], y))
    return PopulationLayout(areas)


@pytest.fixture
def small_layout():
    return make_layout(seed=11, D=6)


@pytest.fixture
def desk_layout():
    from logsae.sim_oracle import desk_design, simulate_population

    des = desk_design()
    pop = simulate_population(des, 0)
    return PopulationLayout(
        [AreaFrame(i, x[:n], x[n:], y[:n]) for i, x, n, y in zip(des.area_ids, des.X, des.n_d, pop.y)]
    )


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
