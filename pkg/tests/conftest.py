import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from flowreg.geometry import RigidTransform


def random_rigid(rng, scale=5.0) -> RigidTransform:
    return RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-scale, scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria append (name, passed, detail) here; printed after the run
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
