import enum
from typing import Optional

import numpy as np
from pydantic import field_validator

from app.models.base import ArrayModel, FrozenModel
from app.models.geometry import Ellipse, Pair


class VerdictEnum(str, enum.Enum):
    """
    Outcome of ellipse detection on one mask.

    VALID_INTACT: Inliers cover the whole perimeter evenly.
    VALID_CORRUPTED: Validated by rectification, the target is damaged or occluded.
    INVALID: No ellipse, or the object is not a sphere.
    """
    VALID_INTACT = "ValidIntact"
    VALID_CORRUPTED = "ValidCorrupted"
    INVALID = "Invalid"


class EdgePointSet(ArrayModel):
    """
    Boundary pixels of one mask.

    Attributes:
        points (NDArray): (N, 2) pixel coordinates (u = column, v = row) in
            raster-scan order.
        source_mask_id (str): Identifier of the mask the points came from.
    """
    points: np.ndarray
    source_mask_id: str = "mask"

    @field_validator("points", mode="before")
    @classmethod
    def coerce_points(cls, value):
        points = np.asarray(value, dtype=np.float64).reshape(-1, 2)
        return points

    def __len__(self) -> int:
        return len(self.points)


class AngleHistogram(FrozenModel):
    """
    Histogram of inlier parametric angles around the ellipse.

    Attributes:
        bin_counts (list[int]): Count per bin, bin i covers [2 pi i / B, 2 pi (i + 1) / B).
        bin_count (int): Number of bins B.
    """
    bin_counts: list[int]
    bin_count: int

    @property
    def total(self) -> int:
        return sum(self.bin_counts)


class ConcentrationRegion(FrozenModel):
    """
    Maximal circular run of histogram bins above the occupancy threshold.

    Attributes:
        bins (list[int]): Bin indices in circular order.
    """
    bins: list[int]


class EllipseEvaluation(FrozenModel):
    """
    Result of the histogram test.

    Attributes:
        intact (bool): True when every bin is sufficiently occupied.
        histogram (AngleHistogram): The angle histogram of the inliers.
        regions (list[ConcentrationRegion]): Concentration regions, empty when intact.
    """
    intact: bool
    histogram: AngleHistogram
    regions: list[ConcentrationRegion] = []


class EllipseFit(ArrayModel):
    """
    An ellipse together with the indices of the edge points that support it.

    Attributes:
        ellipse (Ellipse): The fitted ellipse.
        inlier_index (NDArray): Indices into the edge set (the set P_e).
        rounds (int): Exclusion or rectification rounds that were run.
    """
    ellipse: Ellipse
    inlier_index: np.ndarray
    rounds: int = 0


class EllipseDetection(ArrayModel):
    """
    Final detection on one mask.

    Attributes:
        ellipse (Optional[Ellipse]): Detected ellipse, None when invalid.
        inlier_points (NDArray): (M, 2) inlier pixels, a subset of the edge set.
        verdict (VerdictEnum): Detection verdict.
        mean_residual (float): Mean inlier distance to the ellipse in pixels.
        histogram (Optional[AngleHistogram]): Angle histogram of the initial detection.
        reason (str): Why the mask was rejected, empty for valid detections.
        failed_stage (Optional[str]): Pipeline stage that rejected the mask.
        source_mask_id (str): Mask identifier.
    """
    ellipse: Optional[Ellipse] = None
    inlier_points: np.ndarray
    verdict: VerdictEnum
    mean_residual: float = float("inf")
    histogram: Optional[AngleHistogram] = None
    reason: str = ""
    failed_stage: Optional[str] = None
    source_mask_id: str = "mask"

    @property
    def is_valid(self) -> bool:
        return self.verdict != VerdictEnum.INVALID


class CameraExtraction(FrozenModel):
    """
    Compensated sphere center extracted from one or more candidate masks.

    Attributes:
        center (tuple[float, float]): Compensated sphere center in pixels.
        ellipse (Ellipse): Ellipse of the winning detection.
        verdict (VerdictEnum): Verdict of the winning detection.
        mask_id (str): Identifier of the winning mask.
        mean_residual (float): Mean boundary residual of the winning detection.
        masks_tried (int): Number of candidate masks processed.
    """
    center: Pair
    ellipse: Ellipse
    verdict: VerdictEnum
    mask_id: str
    mean_residual: float
    masks_tried: int
