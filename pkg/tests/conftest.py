import numpy as np
import pytest

from kp3d.geometry import CameraIntrinsics, Pose, se3_exp


@pytest.fixture
def K():
    return CameraIntrinsics(500.0, 480.0, 320.0, 240.0)


def random_pose(rng, max_angle=0.5, t_scale=1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return se3_exp(np.concatenate([axis * rng.uniform(0, max_angle), rng.normal(size=3) * t_scale]))


def points_in_front(rng, n, zmin=2.0, zmax=20.0):
    z = rng.uniform(zmin, zmax, n)
    return np.stack([rng.uniform(-0.6, 0.6, n) * z, rng.uniform(-0.45, 0.45, n) * z, z])


# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
