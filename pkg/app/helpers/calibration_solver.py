import math
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import linalg
from scipy.spatial.transform import Rotation

from app.helpers.geometry import rotation_geodesic_deg, skew
from app.models.calibration import CalibrationResult, CenterPair, ErrorMetrics, RobustKernel
from app.models.config import KernelEnum, SolverConfig
from app.models.geometry import CameraIntrinsics, RigidTransform
from app.utilities.exceptions import (
    DegenerateConfiguration,
    NonFiniteResidual,
    TooFewPairs,
)
from app.utilities.logger import logger

DLT_MIN_PAIRS = 6
NULLSPACE_TOL = 1e-10
PLANARITY_TOL = 1e-9
MAX_DAMPING = 1e16

# results outside these bounds are reported as not applicable
BOUND_TRANS_M = 1.0
BOUND_ROT_DEG = 10.0
BOUND_REPROJ_PX = 20.0


def _arrays(pairs: Sequence[CenterPair]):
    lidar = np.array([p.p_lidar for p in pairs], dtype=np.float64).reshape(-1, 3)
    cam = np.array([p.p_cam for p in pairs], dtype=np.float64).reshape(-1, 2)
    return lidar, cam


def _check_unique(pairs: Sequence[CenterPair]):
    ids = [p.scene_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise DegenerateConfiguration("scene ids of the pairs are not unique")


def _similarity(points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Isotropic normalisation moving the centroid to 0 and the RMS norm to sqrt(dim)."""
    dim = points.shape[1]
    mean = points.mean(axis=0)
    rms = math.sqrt(np.mean(np.sum((points - mean) ** 2, axis=1)))
    if not rms > 0:
        raise DegenerateConfiguration("points coincide")
    scale = math.sqrt(dim) / rms
    T = np.eye(dim + 1)
    T[:dim, :dim] *= scale
    T[:dim, dim] = -scale * mean
    return T


def solve_pnp_init(pairs: Sequence[CenterPair], K: CameraIntrinsics) -> RigidTransform:
    """
    Linear pose estimate by the direct linear transform.

    Both point sets are normalised, the 2N x 12 system is solved by SVD and
    the left 3x3 block is projected to the closest rotation by polar
    decomposition.

    Args:
        pairs (Sequence[CenterPair]): At least six pairs.
        K (CameraIntrinsics): Camera intrinsics.

    Returns:
        RigidTransform: Initial T^C_L.

    Raises:
        DegenerateConfiguration: If there are fewer than six pairs, the 3D
            points are coplanar or collinear, or the solution is not unique.
    """
    if len(pairs) < DLT_MIN_PAIRS:
        raise DegenerateConfiguration(f"{len(pairs)} pairs, the linear solve needs {DLT_MIN_PAIRS}")
    lidar, cam = _arrays(pairs)
    spread = np.linalg.svd(lidar - lidar.mean(axis=0), compute_uv=False)
    if spread[0] == 0 or spread[-1] / spread[0] < PLANARITY_TOL:
        raise DegenerateConfiguration("3D points are coplanar or collinear")

    rays = np.column_stack([cam, np.ones(len(cam))]) @ np.linalg.inv(K.matrix).T
    T2 = _similarity(rays[:, :2])
    T3 = _similarity(lidar)
    x = np.column_stack([rays[:, :2], np.ones(len(rays))]) @ T2.T
    X = np.column_stack([lidar, np.ones(len(lidar))]) @ T3.T

    rows = []
    for (u, v, _), Xh in zip(x, X):
        rows.append(np.concatenate([Xh, np.zeros(4), -u * Xh]))
        rows.append(np.concatenate([np.zeros(4), Xh, -v * Xh]))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[-2] / s[0] < NULLSPACE_TOL:
        raise DegenerateConfiguration("linear pose system has more than one solution")
    P = np.linalg.inv(T2) @ vt[-1].reshape(3, 4) @ T3

    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    rotation, positive = linalg.polar(P[:, :3])
    scale = np.trace(positive) / 3.0
    if not scale > 0:
        raise DegenerateConfiguration("linear pose has zero scale")
    translation = P[:, 3] / scale
    if np.median(lidar @ rotation[2] + translation[2]) <= 0:
        raise DegenerateConfiguration("linear pose places the points behind the camera")
    return RigidTransform(rotation=rotation, translation=translation)


def fallback_transform(pairs: Sequence[CenterPair], K: CameraIntrinsics) -> RigidTransform:
    """
    Identity rotation with the translation that puts the point centroid on
    the ray of the mean pixel, at the mean point range.
    """
    lidar, cam = _arrays(pairs)
    centroid = lidar.mean(axis=0)
    mean_range = float(np.mean(np.linalg.norm(lidar, axis=1)))
    u, v = cam.mean(axis=0)
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    ray /= np.linalg.norm(ray)
    return RigidTransform(rotation=np.eye(3), translation=mean_range * ray - centroid)


def initial_transform(pairs: Sequence[CenterPair], K: CameraIntrinsics) -> RigidTransform:
    try:
        return solve_pnp_init(pairs, K)
    except DegenerateConfiguration as error:
        logger.warning(f"Linear initialisation failed ({error.detail}), using the centroid fallback")
        return fallback_transform(pairs, K)


def residuals_and_jacobian(transform: RigidTransform, lidar: NDArray[np.float64], cam: NDArray[np.float64],
                           K: CameraIntrinsics, with_jacobian: bool = True):
    """
    Reprojection residuals and their Jacobian.

    The parameters are a left rotation increment w (R <- exp(w) R) and a
    translation increment, so each 2x6 block is dpi/dp [-[R p]x, I].

    Args:
        transform (RigidTransform): Current T^C_L.
        lidar (NDArray): (N, 3) LiDAR points.
        cam (NDArray): (N, 2) measured pixels.
        K (CameraIntrinsics): Camera intrinsics.
        with_jacobian (bool): Skip the Jacobian when False.

    Returns:
        tuple[NDArray, Optional[NDArray], NDArray]: Residuals (N, 2), the
        Jacobian (N, 2, 6) or None, and the camera-frame depths (N,).
    """
    rotated = lidar @ transform.R.T
    p = rotated + transform.t
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p[:, 0] / z + K.cx
        v = K.fy * p[:, 1] / z + K.cy
    residuals = np.column_stack([u, v]) - cam
    if not with_jacobian:
        return residuals, None, z

    d_proj = np.zeros((len(p), 2, 3))
    d_proj[:, 0, 0] = K.fx / z
    d_proj[:, 0, 2] = -K.fx * p[:, 0] / z ** 2
    d_proj[:, 1, 1] = K.fy / z
    d_proj[:, 1, 2] = -K.fy * p[:, 1] / z ** 2
    d_point = np.zeros((len(p), 3, 6))
    d_point[:, :, :3] = -np.array([skew(q) for q in rotated])
    d_point[:, :, 3:] = np.eye(3)
    return residuals, d_proj @ d_point, z


def kernel_cost_and_weights(norms: NDArray[np.float64], kernel: RobustKernel):
    """
    Robust cost rho(s) and IRLS weights rho'(s) / s for residual norms s.

    huber: s^2 / 2 inside the scale, scale * (s - scale / 2) outside.
    cauchy: scale^2 / 2 * log(1 + (s / scale)^2).
    none: s^2 / 2.
    """
    delta = kernel.scale
    if kernel.kind == KernelEnum.HUBER:
        inside = norms <= delta
        cost = np.where(inside, 0.5 * norms ** 2, delta * (norms - 0.5 * delta))
        weights = np.where(inside, 1.0, delta / np.maximum(norms, 1e-300))
    elif kernel.kind == KernelEnum.CAUCHY:
        ratio = (norms / delta) ** 2
        cost = 0.5 * delta ** 2 * np.log1p(ratio)
        weights = 1.0 / (1.0 + ratio)
    else:
        cost = 0.5 * norms ** 2
        weights = np.ones_like(norms)
    return cost, weights


def _robust_cost(residuals: NDArray[np.float64], kernel: RobustKernel) -> float:
    cost, _ = kernel_cost_and_weights(np.linalg.norm(residuals, axis=1), kernel)
    return float(np.sum(cost))


def _result(transform: RigidTransform, pairs: Sequence[CenterPair], K: CameraIntrinsics,
            rejected: Sequence[str], iterations: int, converged: bool, termination: str,
            kernel: RobustKernel, cost_history: Sequence[float] = ()) -> CalibrationResult:
    lidar, cam = _arrays(pairs)
    residuals, _, _ = residuals_and_jacobian(transform, lidar, cam, K, with_jacobian=False)
    norms = np.linalg.norm(residuals, axis=1)
    accepted = np.array([p.scene_id not in rejected for p in pairs])
    rms = float(np.sqrt(np.mean(norms[accepted] ** 2))) if accepted.any() else math.inf
    return CalibrationResult(
        transform=transform,
        per_pair_residual={p.scene_id: float(n) for p, n in zip(pairs, norms)},
        rejected_ids=list(rejected),
        rms_reprojection=rms,
        iterations=iterations,
        converged=converged,
        termination=termination,
        cost=_robust_cost(residuals[accepted], kernel) if accepted.any() else math.inf,
        cost_history=list(cost_history),
    )


def kernel_from_config(cfg: SolverConfig) -> RobustKernel:
    return RobustKernel(kind=cfg.kernel, scale=cfg.huber_px)


def solve_pnp_lm(pairs: Sequence[CenterPair], K: CameraIntrinsics, init: RigidTransform,
                 kernel: Optional[RobustKernel], cfg: SolverConfig) -> CalibrationResult:
    """
    Robust Levenberg-Marquardt refinement of the reprojection error.

    Each iteration re-weights the pairs from the kernel, solves
    (H + lambda diag(H)) delta = -g and keeps the step only when the robust
    cost drops and every point stays in front of the camera. The cost after
    every accepted step is kept in `cost_history`, which never increases.

    Args:
        pairs (Sequence[CenterPair]): At least four pairs.
        K (CameraIntrinsics): Camera intrinsics.
        init (RigidTransform): Starting transform.
        kernel (Optional[RobustKernel]): Robust loss, taken from `cfg` when None.
        cfg (SolverConfig): Damping schedule and stopping tolerances.

    Returns:
        CalibrationResult: The refined transform; `converged` is False when
        `max_iter` was reached first.

    Raises:
        TooFewPairs: If fewer than four pairs are given.
        NonFiniteResidual: If the initial residuals are not finite.
    """
    if len(pairs) < 4:
        raise TooFewPairs(f"{len(pairs)} pairs, at least 4 are needed")
    _check_unique(pairs)
    kernel = kernel or kernel_from_config(cfg)
    lidar, cam = _arrays(pairs)
    transform = init
    residuals, jacobian, z = residuals_and_jacobian(transform, lidar, cam, K)
    if np.any(z <= 0) or not np.all(np.isfinite(residuals)):
        raise NonFiniteResidual("initial transform does not project every point")
    cost = _robust_cost(residuals, kernel)
    history = [cost]
    damping = cfg.lambda0
    termination = "max_iter"
    converged = False

    iteration = 0
    while iteration < cfg.max_iter:
        iteration += 1
        _, weights = kernel_cost_and_weights(np.linalg.norm(residuals, axis=1), kernel)
        J = jacobian.reshape(-1, 6)
        w = np.repeat(weights, 2)
        H = J.T @ (w[:, None] * J)
        g = J.T @ (w * residuals.reshape(-1))
        if np.max(np.abs(g)) < cfg.g_tol:
            termination, converged = "gradient", True
            break
        step = np.linalg.solve(H + damping * np.diag(np.diag(H)) + 1e-300 * np.eye(6), -g)
        if np.linalg.norm(step) < cfg.x_tol:
            termination, converged = "step", True
            break
        candidate = RigidTransform(
            rotation=Rotation.from_rotvec(step[:3]).as_matrix() @ transform.R,
            translation=transform.t + step[3:],
        )
        trial, trial_jacobian, trial_z = residuals_and_jacobian(candidate, lidar, cam, K)
        trial_cost = _robust_cost(trial, kernel) if np.all(trial_z > 0) else math.inf
        logger.debug(f"LM iteration {iteration}: cost {cost:.6e} -> {trial_cost:.6e}, lambda {damping:.1e}")
        if np.isfinite(trial_cost) and trial_cost < cost:
            transform, residuals, jacobian, cost = candidate, trial, trial_jacobian, trial_cost
            history.append(cost)
            damping *= cfg.lambda_down
        else:
            damping *= cfg.lambda_up
            if damping > MAX_DAMPING:
                termination, converged = "damping", True
                break

    if not converged:
        logger.warning(f"LM stopped after {cfg.max_iter} iterations without converging")
    return _result(transform, pairs, K, [], iteration, converged, termination, kernel, history)


def reject_and_resolve(result: CalibrationResult, pairs: Sequence[CenterPair], K: CameraIntrinsics,
                       thresh_px: float, cfg: SolverConfig,
                       kernel: Optional[RobustKernel] = None) -> CalibrationResult:
    """
    Drops pairs above the residual threshold and re-solves until none remain.

    Args:
        result (CalibrationResult): A prior solution over `pairs`.
        pairs (Sequence[CenterPair]): All pairs of the problem.
        K (CameraIntrinsics): Camera intrinsics.
        thresh_px (float): Residual threshold in pixels.
        cfg (SolverConfig): Solver settings; `min_pairs` bounds the survivors.
        kernel (Optional[RobustKernel]): Robust loss, taken from `cfg` when None.

    Returns:
        CalibrationResult: The input unchanged when no pair exceeds the
        threshold, otherwise the re-solved result with the dropped ids in
        `rejected_ids`.

    Raises:
        TooFewPairs: If fewer than `cfg.min_pairs` pairs survive.
    """
    kernel = kernel or kernel_from_config(cfg)
    rejected = list(result.rejected_ids)
    current = result
    while True:
        exceeding = [p.scene_id for p in pairs
                     if p.scene_id not in rejected and current.per_pair_residual[p.scene_id] > thresh_px]
        if not exceeding:
            return current
        rejected.extend(exceeding)
        survivors = [p for p in pairs if p.scene_id not in rejected]
        logger.info(f"Rejected {', '.join(exceeding)} above {thresh_px} px, {len(survivors)} pairs left")
        if len(survivors) < cfg.min_pairs:
            raise TooFewPairs(f"{len(survivors)} pairs survive rejection, {cfg.min_pairs} required")
        solved = solve_pnp_lm(survivors, K, current.transform, kernel, cfg)
        current = _result(solved.transform, pairs, K, rejected, solved.iterations, solved.converged,
                          solved.termination, kernel, solved.cost_history)


def calibrate_pairs(pairs: Sequence[CenterPair], K: CameraIntrinsics, cfg: SolverConfig) -> CalibrationResult:
    """
    Initialisation, robust refinement and threshold rejection in one call.

    Raises:
        TooFewPairs: If fewer than `cfg.min_pairs` pairs are given or survive.
    """
    if len(pairs) < cfg.min_pairs:
        raise TooFewPairs(f"{len(pairs)} pairs, {cfg.min_pairs} required")
    _check_unique(pairs)
    init = initial_transform(pairs, K)
    result = solve_pnp_lm(pairs, K, init, None, cfg)
    result = reject_and_resolve(result, pairs, K, cfg.reject_thresh_px, cfg)
    logger.info(f"Calibration: rms {result.rms_reprojection:.3f} px over {len(result.accepted_ids)} pairs, "
                f"{result.iterations} iterations ({result.termination})")
    return result


def evaluate_against_truth(result: CalibrationResult | RigidTransform, T_gt: RigidTransform,
                           rms_px: Optional[float] = None, label: Optional[str] = None) -> ErrorMetrics:
    """
    Translation, rotation and reprojection errors against ground truth.

    Args:
        result (CalibrationResult | RigidTransform): The solution.
        T_gt (RigidTransform): Ground-truth T^C_L.
        rms_px (Optional[float]): Reprojection RMS, taken from the result when omitted.
        label (Optional[str]): Row label for reports.

    Returns:
        ErrorMetrics: The errors and whether they fall within the
        plausibility bounds (1 m, 10 degrees, 20 px).
    """
    if isinstance(result, CalibrationResult):
        transform = result.transform
        rms_px = result.rms_reprojection if rms_px is None else rms_px
    else:
        transform = result
        rms_px = 0.0 if rms_px is None else rms_px
    trans_err = float(np.linalg.norm(transform.t - T_gt.t))
    rot_err = rotation_geodesic_deg(transform.R, T_gt.R)
    within = trans_err <= BOUND_TRANS_M and rot_err <= BOUND_ROT_DEG and rms_px <= BOUND_REPROJ_PX
    return ErrorMetrics(trans_err_m=trans_err, rot_err_deg=rot_err, rms_px=float(rms_px),
                        within_bounds=within, label=label)
