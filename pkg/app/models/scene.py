from typing import Annotated, Literal, Optional

import numpy as np
from pydantic import Field, model_validator

from app.models.base import ArrayModel, FrozenModel
from app.models.config import ScanModeEnum
from app.models.geometry import CameraIntrinsics, Ellipse, Pair, RigidTransform, SphereParams, Triple


class NoiseModel(FrozenModel):
    """
    Sensor noise of a scene.

    Attributes:
        sigma0 (float): Range noise at normal incidence, meters.
        incidence_gain (float): Growth of the noise with tan(incidence).
        sigma_max (float): Cap of the range noise.
        clutter_rate (float): Spurious returns per real return.
        mask_jitter_px (float): RMS radial perturbation of the mask outline.
    """
    sigma0: Annotated[float, Field(ge=0)] = 0.0
    incidence_gain: Annotated[float, Field(ge=0)] = 0.0
    sigma_max: Annotated[float, Field(ge=0)] = 0.03
    clutter_rate: Annotated[float, Field(ge=0, le=1)] = 0.0
    mask_jitter_px: Annotated[float, Field(ge=0)] = 0.0

    def sigma(self, incidence: np.ndarray) -> np.ndarray:
        """Range noise sigma0 (1 + gain tan(theta)), capped at sigma_max."""
        with np.errstate(over="ignore", invalid="ignore"):
            sigma = self.sigma0 * (1.0 + self.incidence_gain * np.tan(incidence))
        return np.minimum(np.nan_to_num(sigma, nan=0.0, posinf=self.sigma_max), self.sigma_max)


class OccluderBlob(FrozenModel):
    """
    Disk removed from the mask, centred on the outline.

    Attributes:
        angle (float): Parametric angle of the blob center on the outline, radians.
        angular_radius (float): Half of the outline arc the blob covers, radians.
    """
    angle: float
    angular_radius: Annotated[float, Field(gt=0, lt=np.pi / 2)]


class CorruptionSpec(FrozenModel):
    """
    Mask damage applied after rasterisation.

    Attributes:
        truncation_frac (float): Share of the outline area cut off by a chord.
        truncation_angle (float): Direction of the cut side, radians.
        occluder_blobs (list[OccluderBlob]): Rim occluders.
        scratch_lines (int): Thin chords carved through the mask.
        blur_erosion_px (int): Boundary erosion in pixels.
        mud_mask_frac (float): Share of the mask hidden by a mud disk.
        mud_angle (float): Direction of the mud disk from the outline center.
    """
    truncation_frac: Annotated[float, Field(ge=0, lt=0.5)] = 0.0
    truncation_angle: float = 0.0
    occluder_blobs: list[OccluderBlob] = []
    scratch_lines: Annotated[int, Field(ge=0)] = 0
    blur_erosion_px: Annotated[int, Field(ge=0)] = 0
    mud_mask_frac: Annotated[float, Field(ge=0, lt=1)] = 0.0
    mud_angle: float = 0.0

    @property
    def is_clean(self) -> bool:
        return (self.truncation_frac == 0 and not self.occluder_blobs and self.scratch_lines == 0
                and self.blur_erosion_px == 0 and self.mud_mask_frac == 0)


class ScanPattern(FrozenModel):
    """
    Beam layout of the simulated LiDAR, angles in degrees.

    Spinning uses rings from el_min to el_max every ring_step with azimuth
    steps of az_step over +/- az_fov. Solid state uses a tangent-plane grid
    of pitch grid_step over the same field. Non-repetitive draws
    rosette_points per frame along a rosette of radius rosette_fov centred
    on the middle elevation.
    """
    mode: ScanModeEnum = ScanModeEnum.SPINNING
    el_min: float = -10.0
    el_max: float = 4.0
    ring_step: Annotated[float, Field(gt=0)] = 0.2
    az_fov: Annotated[float, Field(gt=0)] = 30.0
    az_step: Annotated[float, Field(gt=0)] = 0.2
    grid_step: Annotated[float, Field(gt=0)] = 0.4
    rosette_points: Annotated[int, Field(ge=1)] = 5000
    rosette_fov: Annotated[float, Field(gt=0)] = 20.0


class Box(FrozenModel):
    """
    Clutter box standing on the ground.

    Attributes:
        center (tuple[float, float, float]): Box center in the LiDAR frame.
        size (tuple[float, float, float]): Edge lengths along the box axes.
        yaw (float): Rotation about z, radians.
    """
    center: Triple
    size: Triple
    yaw: float = 0.0


class SceneSpec(FrozenModel):
    """
    Everything needed to synthesise one scene.

    Attributes:
        scene_id (str): Scene identifier.
        sphere (SphereParams): Target in the LiDAR frame.
        T_gt (RigidTransform): Ground-truth LiDAR to camera transform.
        K (CameraIntrinsics): Camera intrinsics.
        pattern (ScanPattern): LiDAR beam layout.
        frames (int): Accumulated frames.
        noise (NoiseModel): Sensor noise.
        corruption (CorruptionSpec): Mask damage.
        seed (int): Seed of every random draw of the scene.
        lidar_height (float): Height of the LiDAR above the ground.
        ground_tilt_deg (float): Ground slope about the y axis.
        clutter (list[Box]): Clutter boxes.
        max_range (float): Returns beyond this range are dropped.
        decoy_shape (Optional[str]): Non-spherical object rendered instead of
            the sphere outline.
    """
    scene_id: str
    sphere: SphereParams
    T_gt: RigidTransform
    K: CameraIntrinsics
    pattern: ScanPattern = ScanPattern()
    frames: Annotated[int, Field(ge=1)] = 100
    noise: NoiseModel = NoiseModel()
    corruption: CorruptionSpec = CorruptionSpec()
    seed: int = 0
    lidar_height: Annotated[float, Field(gt=0)] = 1.0
    ground_tilt_deg: float = 0.0
    clutter: list[Box] = []
    max_range: Annotated[float, Field(gt=0)] = 8.0
    decoy_shape: Optional[Literal["rectangle", "triangle"]] = None

    @model_validator(mode="after")
    def check_sphere_above_ground(self):
        if self.sphere.center[2] - self.sphere.radius <= -self.lidar_height:
            raise ValueError("sphere intersects the ground")
        return self


class RenderedMask(ArrayModel):
    """
    Rendered camera mask of a scene.

    Attributes:
        mask (np.ndarray): Boolean image, True on the target.
        outline (Ellipse): Analytic outline ellipse of the sphere.
        true_center (tuple[float, float]): Projection of the sphere center.
    """
    mask: np.ndarray
    outline: Ellipse
    true_center: Pair


class ManifestEntry(FrozenModel):
    """
    Files and metadata of one scene in a dataset.

    Paths are relative to the manifest's directory.
    """
    scene_id: str
    cloud: str
    mask: str
    truth: str
    seed: int
    scan_mode: ScanModeEnum
    radius: float
    decoy: bool = False


class Manifest(FrozenModel):
    """
    Index of a generated dataset.

    Attributes:
        scenes (list[ManifestEntry]): One entry per scene, ordered by scene_id.
        rig (Optional[str]): Rig truth file with the intrinsics and T_gt.
        config (dict): Snapshot of the run configuration.
    """
    scenes: list[ManifestEntry] = []
    rig: Optional[str] = None
    config: dict = {}
