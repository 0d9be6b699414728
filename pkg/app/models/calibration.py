from typing import Optional

from pydantic import field_validator

from app.models.base import FrozenModel
from app.models.camera import VerdictEnum
from app.models.config import KernelEnum
from app.models.geometry import Pair, RigidTransform, Triple, _to_floats


class CenterPair(FrozenModel):
    """
    Matched sphere centers of one scene.

    Attributes:
        scene_id (str): Scene identifier, unique within a problem.
        p_lidar (tuple[float, float, float]): Sphere center in the LiDAR frame, meters.
        p_cam (tuple[float, float]): Compensated sphere center in the image, pixels.
    """
    scene_id: str
    p_lidar: Triple
    p_cam: Pair

    @field_validator("p_lidar", mode="before")
    @classmethod
    def coerce_lidar(cls, value):
        return _to_floats(value, 3)

    @field_validator("p_cam", mode="before")
    @classmethod
    def coerce_cam(cls, value):
        return _to_floats(value, 2)


class RobustKernel(FrozenModel):
    """
    Loss applied to each pair's reprojection distance.

    Attributes:
        kind (KernelEnum): huber, cauchy or none (plain least squares).
        scale (float): Kernel scale in pixels.
    """
    kind: KernelEnum = KernelEnum.HUBER
    scale: float = 2.0


class CalibrationResult(FrozenModel):
    """
    Solved LiDAR to camera transform.

    Attributes:
        transform (RigidTransform): Estimated T^C_L.
        per_pair_residual (dict[str, float]): Reprojection distance of every
            input pair under `transform`, rejected ones included.
        rejected_ids (list[str]): Scenes dropped by threshold rejection.
        rms_reprojection (float): RMS residual over the accepted pairs.
        iterations (int): LM iterations of the last solve.
        converged (bool): False when the last solve hit `max_iter`.
        termination (str): Stopping reason of the last solve.
        cost (float): Final robust cost over the accepted pairs.
        cost_history (list[float]): Robust cost at the start of the last solve
            and after each of its accepted steps.
    """
    transform: RigidTransform
    per_pair_residual: dict[str, float]
    rejected_ids: list[str] = []
    rms_reprojection: float
    iterations: int
    converged: bool
    termination: str = ""
    cost: float = 0.0
    cost_history: list[float] = []

    @property
    def accepted_ids(self) -> list[str]:
        return [scene_id for scene_id in self.per_pair_residual if scene_id not in self.rejected_ids]


class ErrorMetrics(FrozenModel):
    """
    Errors of a result against the ground truth transform.

    Attributes:
        trans_err_m (float): Translation error in meters.
        rot_err_deg (float): Rotation geodesic error in degrees.
        rms_px (float): RMS reprojection error over accepted pairs.
        within_bounds (bool): False when any error exceeds the plausibility
            bounds; such rows print as N/A.
    """
    trans_err_m: float
    rot_err_deg: float
    rms_px: float
    within_bounds: bool = True
    label: Optional[str] = None


class SceneDiagnostics(FrozenModel):
    """
    Outcome of center extraction on one scene.

    Attributes:
        scene_id (str): Scene identifier.
        paired (bool): Both centers were extracted.
        error (Optional[dict]): Error record of the failing stage of a skipped scene.
        verdict (Optional[VerdictEnum]): Camera verdict.
        mask_residual_px (Optional[float]): Mean boundary residual of the ellipse.
        roi_points (Optional[int]): LiDAR points kept by the region of interest.
        representatives (Optional[int]): Representative points.
        hypotheses (Optional[int]): Sphere hypotheses that passed the radius gate.
        ground_found (Optional[bool]): Whether a ground plane was removed.
        p_lidar (Optional[tuple]): LiDAR sphere center.
        p_cam (Optional[tuple]): Compensated image center.
        residual_px (Optional[float]): Reprojection distance under the solution.
        rejected (bool): Dropped by threshold rejection.
    """
    scene_id: str
    paired: bool
    error: Optional[dict] = None
    verdict: Optional[VerdictEnum] = None
    mask_residual_px: Optional[float] = None
    roi_points: Optional[int] = None
    representatives: Optional[int] = None
    hypotheses: Optional[int] = None
    ground_found: Optional[bool] = None
    p_lidar: Optional[Triple] = None
    p_cam: Optional[Pair] = None
    residual_px: Optional[float] = None
    rejected: bool = False


class CalibrationReport(FrozenModel):
    """
    Report written by a calibration run.

    Attributes:
        source (str): Manifest or pairs file the run read.
        transform (RigidTransform): Estimated T^C_L.
        rms_reprojection (float): RMS residual over the accepted pairs.
        iterations (int): LM iterations of the last solve.
        converged (bool): Whether the last solve converged.
        termination (str): Stopping reason.
        pairs_used (int): Accepted pairs.
        rejected_ids (list[str]): Pairs dropped by threshold rejection.
        scenes (list[SceneDiagnostics]): Per-scene diagnostics ordered by scene_id.
        metrics (Optional[ErrorMetrics]): Errors against T_gt when the rig truth is known.
        config (dict): Resolved run configuration.
    """
    source: str
    transform: RigidTransform
    rms_reprojection: float
    iterations: int
    converged: bool
    termination: str = ""
    pairs_used: int
    rejected_ids: list[str] = []
    scenes: list[SceneDiagnostics] = []
    metrics: Optional[ErrorMetrics] = None
    config: dict = {}
