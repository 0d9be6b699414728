import math
from typing import Annotated, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from app.models.base import FrozenModel

# Vec2Px is an (u, v) pixel pair and Vec3M an (x, y, z) point in meters. The
# pipelines pass them around as float64 numpy arrays of shape (2,) and (3,).
Vec2Px = NDArray[np.float64]
Vec3M = NDArray[np.float64]

Pair = tuple[float, float]
Triple = tuple[float, float, float]

ORTHONORMAL_TOL = 1e-9


def _to_floats(value, size: int) -> tuple:
    array = np.asarray(value, dtype=np.float64).reshape(-1)
    if array.size != size:
        raise ValueError(f"expected {size} components, got {array.size}")
    if not np.all(np.isfinite(array)):
        raise ValueError("components must be finite")
    return tuple(float(x) for x in array)


class CameraIntrinsics(FrozenModel):
    """
    Pinhole intrinsics of an undistorted camera.

    Attributes:
        fx (float): Horizontal focal length in pixels.
        fy (float): Vertical focal length in pixels.
        cx (float): Principal point column.
        cy (float): Principal point row.
        image_width (int): Image width in pixels.
        image_height (int): Image height in pixels.
    """
    fx: Annotated[float, Field(gt=0)]
    fy: Annotated[float, Field(gt=0)]
    cx: float
    cy: float
    image_width: Annotated[int, Field(gt=0)]
    image_height: Annotated[int, Field(gt=0)]

    @model_validator(mode="after")
    def check_principal_point(self):
        if not 0 < self.cx < self.image_width:
            raise ValueError("cx must lie inside the image")
        if not 0 < self.cy < self.image_height:
            raise ValueError("cy must lie inside the image")
        return self

    @property
    def matrix(self) -> NDArray[np.float64]:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def principal_point(self) -> Vec2Px:
        return np.array([self.cx, self.cy])


class Ellipse(FrozenModel):
    """
    Ellipse in center / semi-axes / angle form, in pixels.

    The canonical form keeps semi_major >= semi_minor > 0 and the major-axis
    angle in [0, pi); a circle stores angle 0.

    Attributes:
        center (tuple[float, float]): Ellipse center (u, v).
        semi_major (float): Semi-major axis a.
        semi_minor (float): Semi-minor axis b.
        angle (float): Major-axis orientation in radians.
    """
    center: Pair
    semi_major: Annotated[float, Field(gt=0)]
    semi_minor: Annotated[float, Field(gt=0)]
    angle: float = 0.0

    @field_validator("center", mode="before")
    @classmethod
    def coerce_center(cls, value):
        return _to_floats(value, 2)

    @model_validator(mode="after")
    def check_canonical(self):
        if self.semi_major < self.semi_minor:
            raise ValueError("semi_major must be >= semi_minor")
        if not 0.0 <= self.angle < math.pi:
            raise ValueError("angle must lie in [0, pi)")
        return self

    @classmethod
    def canonical(cls, center: Sequence[float], a: float, b: float, angle: float) -> "Ellipse":
        """
        Builds an ellipse from unordered axes and any angle.

        Args:
            center (Sequence[float]): Ellipse center (u, v).
            a (float): First semi-axis, along `angle`.
            b (float): Second semi-axis.
            angle (float): Orientation of the first semi-axis in radians.

        Returns:
            Ellipse: The canonical representation.
        """
        if b > a:
            a, b = b, a
            angle += math.pi / 2
        angle = math.fmod(angle, math.pi)
        if angle < 0:
            angle += math.pi
        if angle >= math.pi:
            angle = 0.0
        if a - b <= 1e-12 * a:
            angle = 0.0
        return cls(center=center, semi_major=float(a), semi_minor=float(b), angle=float(angle))

    @property
    def center_array(self) -> Vec2Px:
        return np.array(self.center)

    @property
    def perimeter(self) -> float:
        # Ramanujan's second approximation
        a, b = self.semi_major, self.semi_minor
        h = ((a - b) / (a + b)) ** 2
        return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))

    @property
    def area(self) -> float:
        return math.pi * self.semi_major * self.semi_minor


class SphereParams(FrozenModel):
    """
    Sphere given by center and radius, in meters.

    Attributes:
        center (tuple[float, float, float]): Sphere center.
        radius (float): Sphere radius, strictly positive.
    """
    center: Triple
    radius: Annotated[float, Field(gt=0)]

    @field_validator("center", mode="before")
    @classmethod
    def coerce_center(cls, value):
        return _to_floats(value, 3)

    @property
    def center_array(self) -> Vec3M:
        return np.array(self.center)


class RigidTransform(FrozenModel):
    """
    Rigid motion x -> R x + t, used for the LiDAR to camera extrinsics.

    Attributes:
        rotation (tuple): 3x3 rotation matrix, row-major.
        translation (tuple[float, float, float]): Translation in meters.
    """
    rotation: tuple[Triple, Triple, Triple]
    translation: Triple

    @field_validator("rotation", mode="before")
    @classmethod
    def coerce_rotation(cls, value):
        flat = _to_floats(value, 9)
        return (flat[0:3], flat[3:6], flat[6:9])

    @field_validator("translation", mode="before")
    @classmethod
    def coerce_translation(cls, value):
        return _to_floats(value, 3)

    @model_validator(mode="after")
    def check_rotation(self):
        R = self.R
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")
        return self

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], translation: Sequence[float]) -> "RigidTransform":
        return cls(rotation=Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(),
                   translation=translation)

    @classmethod
    def from_matrix(cls, matrix: Sequence[Sequence[float]]) -> "RigidTransform":
        """
        Builds a transform from a 4x4 homogeneous matrix.

        Args:
            matrix (Sequence[Sequence[float]]): Row-major 4x4 matrix.

        Returns:
            RigidTransform: The rigid transform.
        """
        M = np.asarray(matrix, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return cls(rotation=M[:3, :3], translation=M[:3, 3])

    @property
    def R(self) -> NDArray[np.float64]:
        return np.array(self.rotation)

    @property
    def t(self) -> Vec3M:
        return np.array(self.translation)

    @property
    def matrix(self) -> NDArray[np.float64]:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Maps a (3,) point or an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        R = self.R
        return RigidTransform(rotation=R.T, translation=-R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self after other, x -> self(other(x))."""
        return RigidTransform(rotation=self.R @ other.R, translation=self.R @ other.t + self.t)
