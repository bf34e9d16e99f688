import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from planeslam.geometry import CameraIntrinsics, RigidTransform


@pytest.fixture
def K():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, scale=1.0):
    R = Rotation.random(random_state=rng).as_matrix()
    return RigidTransform(R, rng.uniform(-scale, scale, 3))


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


ACCEPTANCE_LINES = []


def record_acceptance(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
