import numpy as np
import pytest
from hypothesis import settings

from gtforge.geometry import PointCloud, Pose
from gtforge.simulation import build_scene, sensor_preset, simulate_spinning_scan

settings.register_profile("gtforge", deadline=None, max_examples=60)
settings.load_profile("gtforge")


@pytest.fixture(scope="session")
def room():
    return build_scene("room_10x8x3")


@pytest.fixture(scope="session")
def coarse_os0():
    # quarter horizontal resolution keeps scans at 64k rays
    return sensor_preset("os0_128", res_h=0.72)


@pytest.fixture(scope="session")
def room_scan(room, coarse_os0):
    return simulate_spinning_scan(room, Pose.identity(), coarse_os0, seed=11)


def random_pose(rng, max_t=1.0, max_deg=30.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(0, max_deg))
    return Pose.from_rotvec(axis * ang, rng.uniform(-max_t, max_t, size=3))


def plane_cloud(rng, n=2000, size=4.0, noise=0.0):
    xy = rng.uniform(-size / 2, size / 2, size=(n, 2))
    z = rng.normal(0, noise, size=n) if noise else np.zeros(n)
    return PointCloud(np.column_stack([xy, z]))
