import numpy as np
import pytest

from femloc.geometry import Pose, Twist, exp_map


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi - 0.1) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    from femloc.geometry import rotation_from_axis_angle

    return rotation_from_axis_angle(axis * angle)


def random_pose(rng: np.random.Generator, trans_scale: float = 5.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-trans_scale, trans_scale, size=3))


def random_twist(rng: np.random.Generator, max_angle: float = np.pi - 0.1) -> Twist:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(1e-8, max_angle)
    return Twist(rng.uniform(-5, 5, size=3), axis * angle)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
