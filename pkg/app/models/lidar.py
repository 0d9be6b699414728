from typing import Iterator, Optional

import numpy as np
from pydantic import field_validator, model_validator

from app.models.base import ArrayModel, FrozenModel
from app.models.geometry import SphereParams, Triple


class PointCloud(ArrayModel):
    """
    Accumulated LiDAR returns in the sensor frame, meters.

    Attributes:
        points (np.ndarray): (N, 3) coordinates.
        frame (Optional[np.ndarray]): (N,) scan-frame index of every point.
        label (Optional[np.ndarray]): (N,) simulator label (0 ground, 1 sphere,
            2 clutter, 3 spurious).
    """
    points: np.ndarray
    frame: Optional[np.ndarray] = None
    label: Optional[np.ndarray] = None

    @field_validator("points", mode="before")
    @classmethod
    def coerce_points(cls, value):
        return np.asarray(value, dtype=np.float64).reshape(-1, 3)

    @field_validator("frame", "label", mode="before")
    @classmethod
    def coerce_index(cls, value):
        if value is None:
            return None
        return np.asarray(value, dtype=np.int64).reshape(-1)

    @model_validator(mode="after")
    def check_lengths(self):
        for name in ("frame", "label"):
            column = getattr(self, name)
            if column is not None and len(column) != len(self.points):
                raise ValueError(f"{name} length does not match the point count")
        return self

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index: np.ndarray) -> "PointCloud":
        """Returns the points selected by a boolean mask or index array."""
        return PointCloud(
            points=self.points[index],
            frame=None if self.frame is None else self.frame[index],
            label=None if self.label is None else self.label[index],
        )


class GroundSplit(FrozenModel):
    """
    Result of ground segmentation.

    Attributes:
        ground (PointCloud): Points on the ground plane.
        nonground (PointCloud): Everything else.
        plane (Optional[tuple]): Unit normal (pointing up) and offset d of
            n . p + d = 0, None when no plane was found.
        ground_found (bool): False when the cloud was passed through unchanged.
    """
    ground: PointCloud
    nonground: PointCloud
    plane: Optional[tuple[Triple, float]] = None
    ground_found: bool = True


class CircleDetection(FrozenModel):
    """
    Best circle of the range-image Hough transform.

    Attributes:
        row (int): Circle center row (elevation axis).
        col (int): Circle center column (azimuth axis).
        radius_px (float): Circle radius in range-image pixels.
        score (float): Share of the circle perimeter covered by edges.
        median_range (float): Median range of the points inside the circle.
    """
    row: int
    col: int
    radius_px: float
    score: float
    median_range: float


class RayCluster(ArrayModel):
    """
    Returns that share one (azimuth, elevation) bin.

    Attributes:
        direction (np.ndarray): Unit vector through the bin center.
        members (np.ndarray): (k, 3) member points.
        radial_extent (float): Max minus min range of the members.
        azimuth_bin (int): Azimuth bin index.
        elevation_bin (int): Elevation bin index.
    """
    direction: np.ndarray
    members: np.ndarray
    radial_extent: float
    azimuth_bin: int
    elevation_bin: int

    def __len__(self) -> int:
        return len(self.members)


class CellGrid(ArrayModel):
    """
    Equal range intervals along a cluster's ray.

    Attributes:
        M (int): Cell count.
        cell_centers (np.ndarray): (M, 3) member centroid of each occupied
            cell, the interval midpoint on the ray for empty cells.
        counts (np.ndarray): (M,) members per cell.
    """
    M: int
    cell_centers: np.ndarray
    counts: np.ndarray


class SphereHypothesis(FrozenModel):
    """
    Sphere through four representative points.

    Attributes:
        params (SphereParams): Center and radius.
        source (tuple[int, int, int, int]): Indices of the four points.
    """
    params: SphereParams
    source: tuple[int, int, int, int]


class HypothesisSet(ArrayModel):
    """
    Radius-gated hypotheses stored column-wise.

    Attributes:
        centers (np.ndarray): (H, 3) sphere centers.
        radii (np.ndarray): (H,) radii.
        sources (np.ndarray): (H, 4) representative indices, in increasing
            lexicographic order.
        tried (int): Combinations evaluated before gating.
    """
    centers: np.ndarray
    radii: np.ndarray
    sources: np.ndarray
    tried: int = 0

    def __len__(self) -> int:
        return len(self.radii)

    def __getitem__(self, i: int) -> SphereHypothesis:
        return SphereHypothesis(
            params=SphereParams(center=self.centers[i], radius=float(self.radii[i])),
            source=tuple(int(s) for s in self.sources[i]),
        )

    def __iter__(self) -> Iterator[SphereHypothesis]:
        for i in range(len(self)):
            yield self[i]


class ClusterStat(FrozenModel):
    """Per-cluster figure data: bin direction, size, extent and whether it was kept."""
    azimuth: float
    elevation: float
    members: int
    extent: float
    kept: bool


class LidarExtraction(FrozenModel):
    """
    Estimated sphere center with the diagnostics of the run.

    Attributes:
        center (tuple[float, float, float]): Fused sphere center in the LiDAR frame.
        roi_points (int): Points kept by the region of interest.
        representatives (int): Representative points fed to the hypotheses.
        hypotheses (int): Hypotheses that passed the radius gate.
        ground_found (bool): Whether a ground plane was removed.
        clusters (list[ClusterStat]): Ray clusters, empty for the voxel path.
    """
    center: Triple
    roi_points: int
    representatives: int
    hypotheses: int
    ground_found: bool = True
    clusters: list[ClusterStat] = []
