import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ffsfm.geometry import RigidTransform


def random_rigid(rng, translation_scale=2.0, scale=1.0):
    rot = Rotation.random(random_state=np.random.RandomState(rng.integers(2 ** 31))).as_matrix()
    return RigidTransform(rot, translation_scale * rng.standard_normal(3), scale)


def rot_z(angle_deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(angle_deg)), np.sin(np.radians(angle_deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
