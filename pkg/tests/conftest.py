import numpy as np
import pytest

from app.helpers.scene_simulator import CAMERA_FROM_LIDAR
from app.models.config import CameraConfig, LidarConfig, SimConfig, SolverConfig
from app.models.geometry import CameraIntrinsics, RigidTransform


@pytest.fixture
def K() -> CameraIntrinsics:
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, image_width=640, image_height=480)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def camera_cfg() -> CameraConfig:
    return CameraConfig()


@pytest.fixture
def lidar_cfg() -> LidarConfig:
    return LidarConfig()


@pytest.fixture
def solver_cfg() -> SolverConfig:
    return SolverConfig()


@pytest.fixture
def T_gt() -> RigidTransform:
    """Nominal LiDAR to camera mounting with a small tilt and offset."""
    tilt = RigidTransform.from_rotvec([0.02, -0.03, 0.01], [0.0, 0.0, 0.0])
    return RigidTransform(rotation=tilt.R @ CAMERA_FROM_LIDAR, translation=[0.05, -0.1, 0.08])


@pytest.fixture
def clean_sim() -> SimConfig:
    """Small noise-free dataset settings."""
    return SimConfig(
        scenes=8,
        frames=3,
        sigma0=0.0,
        incidence_gain=0.0,
        clutter_rate=0.0,
        mask_jitter_px=0.0,
        clutter_boxes=0,
        rng_seed=7,
    )
