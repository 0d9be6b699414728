import enum
import math
from typing import Annotated, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ScanModeEnum(str, enum.Enum):
    """
    LiDAR scan pattern families.

    SPINNING: Rings of beams at fixed elevations swept in azimuth.
    SOLID_STATE: Fixed rectilinear grid of beams.
    NON_REPETITIVE: Rosette pattern that changes from frame to frame.
    """
    SPINNING = "spinning"
    SOLID_STATE = "solid_state"
    NON_REPETITIVE = "non_repetitive"


class KernelEnum(str, enum.Enum):
    HUBER = "huber"
    CAUCHY = "cauchy"
    NONE = "none"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CameraConfig(_Section):
    """
    Ellipse detection and center extraction settings.

    Attributes:
        sample_size (int): Points per fit draw.
        inlier_tol_px (float): Distance to the boundary that counts as on the ellipse.
        interior_frac (float): Share of the active set allowed strictly inside a fit
            before the interior points are excluded.
        histogram_bins (int): Bins of the angle histogram.
        min_bin_frac (float): Minimum bin occupancy relative to a uniform spread.
        rectify_iters (int): Rectification attempts.
        region_samples (int): Points drawn from each concentration region.
        outside_frac (float): Share of edge points allowed outside a rectified ellipse.
        draws_per_round (int): Random draws per exclusion round.
        min_arc_coverage (float): Inliers per pixel of perimeter needed to accept
            an initial ellipse.
        min_support_frac (float): Share of the initial inliers a rectified ellipse must keep.
        min_arc_span (float): Share of the parametric angle the inliers of a
            rectified ellipse must span. Gaps under three tolerances of perimeter
            count as covered.
        refine_rounds (int): Consensus re-fits applied to every accepted ellipse.
        mask_source (str): ``file`` reads each scene mask as given, ``segment``
            splits the scene image into components with the built-in segmenter.
        segment_threshold (int): Gray level separating foreground in the built-in segmenter.
        min_component_px (int): Smallest connected component kept by the segmenter.
        rng_seed (int): Seed of the sampling generator.
    """
    sample_size: Annotated[int, Field(ge=5)] = 6
    inlier_tol_px: Annotated[float, Field(gt=0)] = 2.0
    interior_frac: Annotated[float, Field(ge=0, lt=1)] = 0.0
    histogram_bins: Annotated[int, Field(ge=3)] = 12
    min_bin_frac: Annotated[float, Field(ge=0, le=1)] = 0.25
    rectify_iters: Annotated[int, Field(ge=1)] = 50
    region_samples: Annotated[int, Field(ge=1)] = 4
    outside_frac: Annotated[float, Field(ge=0, le=1)] = 0.1
    draws_per_round: Annotated[int, Field(ge=1)] = 60
    min_arc_coverage: Annotated[float, Field(ge=0)] = 0.3
    min_support_frac: Annotated[float, Field(ge=0, le=1)] = 0.8
    min_arc_span: Annotated[float, Field(ge=0, le=1)] = 0.45
    refine_rounds: Annotated[int, Field(ge=0)] = 2
    mask_source: Literal["file", "segment"] = "file"
    segment_threshold: Annotated[int, Field(ge=1, le=255)] = 128
    min_component_px: Annotated[int, Field(ge=1)] = 30
    rng_seed: int = 0


class LidarConfig(_Section):
    """
    Sphere center extraction settings. Angles are in radians, lengths in meters.

    `extent_thresh` left unset selects the adaptive cluster length threshold
    (3x the median extent, floored at 2 cm). A Hough circle only becomes the
    ROI when a free sphere fit to its points lands within `roi_fit_radius_tol`
    of `radius_known` with a median residual of `roi_fit_residual` radii.
    """
    sor_k: Annotated[int, Field(ge=1)] = 8
    sor_m: Annotated[float, Field(ge=0)] = 2.0
    ground_dist_thresh: Annotated[float, Field(gt=0)] = 0.02
    ground_ransac_iters: Annotated[int, Field(ge=1)] = 200
    ground_min_frac: Annotated[float, Field(ge=0, le=1)] = 0.3
    ground_min_extent: Annotated[float, Field(ge=0)] = 1.0
    range_image_res: Annotated[float, Field(gt=0)] = math.radians(0.2)
    roi_margin_px: Annotated[float, Field(ge=0)] = 2.0
    roi_range_factor: Annotated[float, Field(gt=0)] = 3.0
    roi_range_jump: Annotated[float, Field(gt=0)] = 0.3
    hough_min_score: Annotated[float, Field(ge=0, le=1)] = 0.5
    hough_peaks: Annotated[int, Field(ge=1)] = 20
    roi_fit_residual: Annotated[float, Field(gt=0)] = 0.15
    roi_fit_radius_tol: Annotated[float, Field(gt=0)] = 0.3
    az_res: Annotated[float, Field(gt=0)] = math.radians(0.2)
    el_res: Annotated[float, Field(gt=0)] = math.radians(0.2)
    extent_thresh: Optional[Annotated[float, Field(gt=0)]] = None
    min_cluster_pts: Annotated[int, Field(ge=1)] = 3
    cells_M: Annotated[int, Field(ge=1)] = 16
    voxel_size: Annotated[float, Field(gt=0)] = 0.01
    radius_known: Annotated[float, Field(gt=0)] = 0.1
    radius_tol: Annotated[float, Field(gt=0)] = 0.01
    combo_cap: Annotated[int, Field(ge=1)] = 200_000
    coplanar_tol: Annotated[float, Field(gt=0)] = 1e-6
    fuse_bin: Annotated[float, Field(gt=0)] = 0.005
    fuse_radius: Annotated[float, Field(ge=0)] = 0.02
    rng_seed: int = 0


class SolverConfig(_Section):
    """Pose solver settings."""
    kernel: KernelEnum = KernelEnum.HUBER
    huber_px: Annotated[float, Field(gt=0)] = 2.0
    reject_thresh_px: Annotated[float, Field(gt=0)] = 5.0
    min_pairs: Annotated[int, Field(ge=4)] = 4
    lambda0: Annotated[float, Field(gt=0)] = 1e-3
    lambda_up: Annotated[float, Field(gt=1)] = 10.0
    lambda_down: Annotated[float, Field(gt=0, lt=1)] = 0.5
    max_iter: Annotated[int, Field(ge=1)] = 100
    g_tol: Annotated[float, Field(gt=0)] = 1e-10
    x_tol: Annotated[float, Field(gt=0)] = 1e-12


class SimConfig(_Section):
    """
    Synthetic dataset settings.

    Geometry follows the LiDAR frame convention x forward, y left, z up; angles
    in degrees. A non-empty `corruption_preset` replaces the individual
    corruption fields.
    """
    scenes: Annotated[int, Field(ge=0)] = 10
    frames: Annotated[int, Field(ge=1)] = 100
    scan_mode: ScanModeEnum = ScanModeEnum.SPINNING
    # spinning
    el_min_deg: float = -10.0
    el_max_deg: float = 4.0
    ring_step_deg: Annotated[float, Field(gt=0)] = 0.2
    az_fov_deg: Annotated[float, Field(gt=0, le=180)] = 30.0
    az_step_deg: Annotated[float, Field(gt=0)] = 0.2
    # solid state
    grid_step_deg: Annotated[float, Field(gt=0)] = 0.4
    # non-repetitive
    rosette_points: Annotated[int, Field(ge=1)] = 5000
    rosette_fov_deg: Annotated[float, Field(gt=0, lt=90)] = 20.0
    # target and placement
    sphere_radius: Annotated[float, Field(gt=0)] = 0.1
    depth_min: Annotated[float, Field(gt=0)] = 2.0
    depth_max: Annotated[float, Field(gt=0)] = 5.0
    sphere_el_min_deg: float = -6.0
    sphere_el_max_deg: float = 0.5
    sphere_az_max_deg: Annotated[float, Field(ge=0)] = 20.0
    # noise
    sigma0: Annotated[float, Field(ge=0)] = 0.003
    incidence_gain: Annotated[float, Field(ge=0)] = 2.0
    sigma_max: Annotated[float, Field(ge=0)] = 0.03
    clutter_rate: Annotated[float, Field(ge=0, le=1)] = 0.001
    mask_jitter_px: Annotated[float, Field(ge=0)] = 1.0
    # corruption
    corruption_preset: Optional[str] = None
    truncation_frac: Annotated[float, Field(ge=0, lt=0.5)] = 0.0
    occluder_count: Annotated[int, Field(ge=0)] = 0
    occluder_radius_deg: Annotated[float, Field(gt=0)] = 10.0
    scratch_lines: Annotated[int, Field(ge=0)] = 0
    blur_erosion_px: Annotated[int, Field(ge=0)] = 0
    mud_mask_frac: Annotated[float, Field(ge=0, lt=1)] = 0.0
    decoy_scenes: Annotated[int, Field(ge=0)] = 0
    decoy_shape: Literal["rectangle", "triangle"] = "rectangle"
    # camera
    image_width: Annotated[int, Field(gt=0)] = 640
    image_height: Annotated[int, Field(gt=0)] = 480
    fx: Annotated[float, Field(gt=0)] = 500.0
    fy: Annotated[float, Field(gt=0)] = 500.0
    cx: float = 320.0
    cy: float = 240.0
    # rig
    baseline: tuple[float, float, float] = (0.0, -0.1, 0.05)
    extrinsic_jitter_deg: Annotated[float, Field(ge=0)] = 2.0
    extrinsic_jitter_m: Annotated[float, Field(ge=0)] = 0.02
    # environment
    lidar_height: Annotated[float, Field(gt=0)] = 1.0
    ground_tilt_deg: Annotated[float, Field(ge=0, lt=45)] = 0.0
    clutter_boxes: Annotated[int, Field(ge=0)] = 1
    max_range: Annotated[float, Field(gt=0)] = 8.0
    rng_seed: int = 0

    @model_validator(mode="after")
    def check_bands(self):
        if self.depth_min >= self.depth_max:
            raise ValueError("depth_min must be below depth_max")
        if self.el_min_deg >= self.el_max_deg:
            raise ValueError("el_min_deg must be below el_max_deg")
        if self.sphere_el_min_deg > self.sphere_el_max_deg:
            raise ValueError("sphere_el_min_deg must not exceed sphere_el_max_deg")
        if self.decoy_scenes > self.scenes:
            raise ValueError("decoy_scenes cannot exceed scenes")
        return self


class RunConfig(_Section):
    """
    Complete configuration of a run, one namespace per pipeline.

    Attributes:
        camera (CameraConfig): Ellipse detection settings.
        lidar (LidarConfig): Sphere center extraction settings.
        solver (SolverConfig): Pose solver settings.
        sim (SimConfig): Synthetic dataset settings.
    """
    camera: CameraConfig = Field(default_factory=CameraConfig)
    lidar: LidarConfig = Field(default_factory=LidarConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    sim: SimConfig = Field(default_factory=SimConfig)
