import numpy as np
import pytest

from tempo.ocp import BoundaryCondition, random_lq_data


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def lq_instances(count=25, seed=7):
    """Seeded single-input controllable instances shared by several tests."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        nx = int(rng.integers(1, 6))
        horizon = int(rng.integers(20, 201))
        data = random_lq_data(rng, nx, 1, spectral_radius=float(rng.uniform(0.5, 1.2)))
        bc = BoundaryCondition(rng.standard_normal(nx), rng.standard_normal(nx))
        out.append((data, 1, 1 + horizon, bc))
    return out


ACCEPTANCE: dict = {}


def record_criterion(number: int, checks: dict, note: str = "") -> bool:
    """Store the per-check outcome of an acceptance criterion for the summary."""
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}"
    if failed:
        line += f" (failed: {', '.join(failed)})"
    if note:
        line += f" [{note}]"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
