import math

import numpy as np
from numpy.typing import NDArray

from app.models.geometry import CameraIntrinsics, Ellipse, SphereParams, Vec2Px, Vec3M
from app.utilities.exceptions import (
    DegenerateConfiguration,
    NonPositiveDepth,
    SphereBehindCamera,
    SphereEnclosesCamera,
)


def project_point(p: Vec3M, K: CameraIntrinsics) -> Vec2Px:
    """
    Projects a camera-frame point with the pinhole model.

    Args:
        p (Vec3M): Point (x, y, z) in the camera frame, meters.
        K (CameraIntrinsics): Camera intrinsics.

    Returns:
        Vec2Px: Pixel coordinates (u, v).

    Raises:
        NonPositiveDepth: If z <= 0.
    """
    x, y, z = (float(c) for c in np.asarray(p, dtype=np.float64).reshape(3))
    if not z > 0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def project_points(points: NDArray[np.float64], K: CameraIntrinsics) -> NDArray[np.float64]:
    """
    Vectorised `project_point` over an (N, 3) array.

    Raises:
        NonPositiveDepth: If any point has z <= 0.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = points[:, 2]
    if np.any(~(z > 0)):
        raise NonPositiveDepth("at least one point has non-positive depth")
    return np.column_stack([K.fx * points[:, 0] / z + K.cx, K.fy * points[:, 1] / z + K.cy])


def ellipse_to_conic(e: Ellipse) -> NDArray[np.float64]:
    """
    Converts an ellipse to conic coefficients (A, B, C, D, E, F) of
    A u^2 + B uv + C v^2 + D u + E v + F = 0, negative inside.
    """
    a, b, theta = e.semi_major, e.semi_minor, e.angle
    u0, v0 = e.center
    s, c = math.sin(theta), math.cos(theta)
    A = a * a * s * s + b * b * c * c
    B = 2.0 * (b * b - a * a) * s * c
    C = a * a * c * c + b * b * s * s
    D = -2.0 * A * u0 - B * v0
    E = -B * u0 - 2.0 * C * v0
    F = A * u0 * u0 + B * u0 * v0 + C * v0 * v0 - a * a * b * b
    return np.array([A, B, C, D, E, F])


def conic_matrix(coeffs: NDArray[np.float64]) -> NDArray[np.float64]:
    """Symmetric 3x3 matrix of a conic given by its six coefficients."""
    A, B, C, D, E, F = coeffs
    return np.array([
        [A, B / 2, D / 2],
        [B / 2, C, E / 2],
        [D / 2, E / 2, F],
    ])


def conic_coefficients(matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    """Six coefficients of a conic given by its symmetric 3x3 matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    return np.array([m[0, 0], 2 * m[0, 1], m[1, 1], 2 * m[0, 2], 2 * m[1, 2], m[2, 2]])


def conic_to_ellipse(coeffs: NDArray[np.float64]) -> Ellipse:
    """
    Converts conic coefficients to the canonical ellipse.

    Args:
        coeffs (NDArray): Coefficients (A, B, C, D, E, F), any scale and sign.

    Returns:
        Ellipse: Canonical center / axes / angle form.

    Raises:
        DegenerateConfiguration: If the conic is not a real, non-degenerate ellipse.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if not np.all(np.isfinite(coeffs)):
        raise DegenerateConfiguration("conic coefficients are not finite")
    scale = np.max(np.abs(coeffs))
    if scale == 0:
        raise DegenerateConfiguration("conic is identically zero")
    A, B, C, D, E, F = coeffs / scale
    if A + C < 0:
        A, B, C, D, E, F = -A, -B, -C, -D, -E, -F
    det = 4 * A * C - B * B
    if det <= 1e-14 * max(A * A + C * C, 1e-300):
        raise DegenerateConfiguration("conic is not an ellipse")
    u0 = (B * E - 2 * C * D) / det
    v0 = (B * D - 2 * A * E) / det
    f_center = A * u0 * u0 + B * u0 * v0 + C * v0 * v0 + D * u0 + E * v0 + F
    if not f_center < 0:
        raise DegenerateConfiguration("conic has no real points")
    M = np.array([[A, B / 2], [B / 2, C]])
    eigvals, eigvecs = np.linalg.eigh(M)
    if eigvals[0] <= 0:
        raise DegenerateConfiguration("conic is not an ellipse")
    # the smallest eigenvalue belongs to the major axis
    a = math.sqrt(-f_center / eigvals[0])
    b = math.sqrt(-f_center / eigvals[1])
    major = eigvecs[:, 0]
    angle = math.atan2(major[1], major[0])
    return Ellipse.canonical((u0, v0), a, b, angle)


def conic_values(e: Ellipse, points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Conic polynomial at each point, normalised so it equals -1 at the center."""
    A, B, C, D, E, F = ellipse_to_conic(e)
    u, v = points[:, 0], points[:, 1]
    values = A * u * u + B * u * v + C * v * v + D * u + E * v + F
    return values / (e.semi_major ** 2 * e.semi_minor ** 2)


def to_ellipse_frame(e: Ellipse, points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Expresses points in the ellipse frame (major axis along x)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c, s = math.cos(e.angle), math.sin(e.angle)
    d = points - e.center_array
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def closest_parametric_angle(e: Ellipse, points: NDArray[np.float64], iterations: int = 12):
    """
    Finds the closest ellipse point to each input point.

    The eccentric anomaly t of the foot point solves
    (b^2 - a^2) sin t cos t + a x sin t - b y cos t = 0 in the ellipse frame;
    it is refined by Newton iterations from the radial guess.

    Args:
        e (Ellipse): The ellipse.
        points (NDArray): (N, 2) pixel coordinates.
        iterations (int): Newton iterations.

    Returns:
        tuple[NDArray, NDArray, NDArray]: Angle t in [0, 2 pi), Euclidean
        distance to the boundary, and a boolean mask of points inside.
    """
    a, b = e.semi_major, e.semi_minor
    local = to_ellipse_frame(e, points)
    x, y = local[:, 0], local[:, 1]
    t = np.arctan2(a * y, b * x)
    k = b * b - a * a
    for _ in range(iterations):
        st, ct = np.sin(t), np.cos(t)
        f = k * st * ct + a * x * st - b * y * ct
        df = k * (ct * ct - st * st) + a * x * ct + b * y * st
        safe = np.abs(df) > 1e-12
        step = np.where(safe, f / np.where(safe, df, 1.0), 0.0)
        t = t - np.clip(step, -0.5, 0.5)
    foot = np.column_stack([a * np.cos(t), b * np.sin(t)])
    distance = np.hypot(x - foot[:, 0], y - foot[:, 1])
    inside = (x / a) ** 2 + (y / b) ** 2 < 1.0
    return np.mod(t, 2 * math.pi), distance, inside


def sphere_outline_ellipse(sphere: SphereParams, K: CameraIntrinsics) -> Ellipse:
    """
    Exact image outline of a sphere under perspective projection.

    The tangent rays from the camera center form the cone
    x^T ((|c|^2 - r^2) I - c c^T) x = 0, mapped to pixels by K^-T (.) K^-1.

    Args:
        sphere (SphereParams): Sphere in the camera frame.
        K (CameraIntrinsics): Camera intrinsics.

    Returns:
        Ellipse: The outline ellipse in pixels.

    Raises:
        SphereEnclosesCamera: If the camera center lies inside the sphere.
        SphereBehindCamera: If the sphere is not fully in front of the camera.
    """
    c = sphere.center_array
    r = sphere.radius
    if np.linalg.norm(c) <= r:
        raise SphereEnclosesCamera("camera center lies inside the sphere")
    if not c[2] > r:
        raise SphereBehindCamera("sphere is not fully in front of the camera")
    cone = (c @ c - r * r) * np.eye(3) - np.outer(c, c)
    K_inv = np.linalg.inv(K.matrix)
    image_conic = K_inv.T @ cone @ K_inv
    return conic_to_ellipse(conic_coefficients(image_conic))


def skew(v: NDArray[np.float64]) -> NDArray[np.float64]:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_geodesic_deg(Ra: NDArray[np.float64], Rb: NDArray[np.float64]) -> float:
    """
    Geodesic distance between two rotations in degrees.

    Equal to arccos((trace(Ra^T Rb) - 1) / 2), evaluated with atan2 so it stays
    accurate near 0 and 180 degrees.

    Args:
        Ra (NDArray): First rotation matrix.
        Rb (NDArray): Second rotation matrix.

    Returns:
        float: Angle in [0, 180].
    """
    D = np.asarray(Ra, dtype=np.float64).T @ np.asarray(Rb, dtype=np.float64)
    cos_part = (np.trace(D) - 1.0) / 2.0
    sin_part = np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]]) / 2.0
    angle = math.degrees(math.atan2(sin_part, cos_part))
    return min(max(angle, 0.0), 180.0)
