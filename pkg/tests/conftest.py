import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cemgmsdg.assembly import FineOperators  # noqa: E402
from cemgmsdg.grid import build_hierarchy  # noqa: E402
from cemgmsdg.medium import CoefficientField, synthetic_field  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def slow_enabled():
    return os.environ.get("CEMW_SLOW", "") not in ("", "0")


def random_field(mesh, seed=0, low=1.0, high=100.0):
    rng = np.random.default_rng(seed)
    return CoefficientField(rng.uniform(low, high, mesh.n_cells), mesh.n_fine)


@pytest.fixture(scope="session")
def small_setup():
    """nc=4, nf=4 contrast-100 inclusions, reused by several modules."""
    mesh = build_hierarchy(4, 4)
    field = synthetic_field(mesh, 1.0, 100.0, "inclusions", seed=1)
    return mesh, field, FineOperators(mesh, field, check_coercivity=False)
