import math
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import linalg, ndimage

from app.helpers.geometry import (
    closest_parametric_angle,
    conic_coefficients,
    conic_matrix,
    conic_to_ellipse,
    ellipse_to_conic,
)
from app.models.camera import (
    AngleHistogram,
    CameraExtraction,
    ConcentrationRegion,
    EdgePointSet,
    EllipseDetection,
    EllipseEvaluation,
    EllipseFit,
    VerdictEnum,
)
from app.models.config import CameraConfig
from app.models.geometry import CameraIntrinsics, Ellipse, Vec2Px
from app.utilities.exceptions import (
    CameraPipelineError,
    DegenerateConfiguration,
    DegenerateGeometry,
    EmptyMask,
    Exhausted,
    NoExteriorCandidates,
    NoValidEllipse,
    SphereCalibError,
    TooFewEdgePoints,
    TooFewInliers,
)
from app.utilities.logger import logger

MIN_FIT_POINTS = 5
RECTIFY_REFINE_ROUNDS = 10
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def extract_edge_points(mask: NDArray, mask_id: str = "mask") -> EdgePointSet:
    """
    Extracts the boundary pixels of a binary mask.

    A boundary pixel is a foreground pixel with at least one background pixel
    among its 8 neighbours; pixels outside the image count as background.

    Args:
        mask (NDArray): Single-channel image, nonzero pixels are foreground.
        mask_id (str): Identifier carried by the edge set.

    Returns:
        EdgePointSet: Boundary pixels as (column, row) in raster-scan order.

    Raises:
        EmptyMask: If the mask has no foreground.
        TooFewEdgePoints: If fewer than five boundary pixels exist.
    """
    foreground = np.asarray(mask) != 0
    if foreground.ndim != 2:
        raise EmptyMask(f"mask {mask_id} is not a single-channel image")
    if not foreground.any():
        raise EmptyMask(f"mask {mask_id} has no foreground")
    interior = ndimage.binary_erosion(foreground, structure=EIGHT_CONNECTED, border_value=0)
    rows, cols = np.nonzero(foreground & ~interior)
    if len(rows) < MIN_FIT_POINTS:
        raise TooFewEdgePoints(f"mask {mask_id} has {len(rows)} boundary pixels")
    return EdgePointSet(points=np.column_stack([cols, rows]).astype(np.float64), source_mask_id=mask_id)


def fit_ellipse_direct(points: NDArray[np.float64]) -> Ellipse:
    """
    Direct least-squares ellipse fit under the constraint 4AC - B^2 = 1.

    The scatter matrix is split into its quadratic and linear blocks and the
    reduced 3x3 eigenproblem is solved. Points are centred and scaled first so
    the problem stays well conditioned for pixel coordinates.

    Args:
        points (NDArray): (N, 2) points, N >= 5.

    Returns:
        Ellipse: The fitted ellipse in canonical form.

    Raises:
        DegenerateConfiguration: If the points are collinear, too few, or the
            best conic is not an ellipse.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < MIN_FIT_POINTS:
        raise DegenerateConfiguration(f"{len(points)} points cannot determine an ellipse")
    mean = points.mean(axis=0)
    centered = points - mean
    scale = math.sqrt(np.mean(np.sum(centered ** 2, axis=1)) / 2.0)
    if not scale > 0:
        raise DegenerateConfiguration("points coincide")
    x, y = (centered / scale).T

    quadratic = np.column_stack([x * x, x * y, y * y])
    linear = np.column_stack([x, y, np.ones_like(x)])
    if np.linalg.matrix_rank(linear) < 3:
        raise DegenerateConfiguration("points are collinear")
    S1 = quadratic.T @ quadratic
    S2 = quadratic.T @ linear
    S3 = linear.T @ linear
    T = -np.linalg.solve(S3, S2.T)
    reduced = S1 + S2 @ T
    # premultiply by the inverse of the constraint matrix
    reduced = np.vstack([reduced[2] / 2.0, -reduced[1], reduced[0] / 2.0])
    _, vectors = linalg.eig(reduced)
    vectors = np.real(vectors)

    design = np.hstack([quadratic, linear])
    best, best_residual = None, math.inf
    for i in range(3):
        a1 = vectors[:, i]
        if 4 * a1[0] * a1[2] - a1[1] ** 2 <= 0:
            continue
        coeffs = np.concatenate([a1, T @ a1])
        residual = np.linalg.norm(design @ coeffs) / np.linalg.norm(coeffs)
        if residual < best_residual:
            best, best_residual = coeffs, residual
    if best is None:
        raise DegenerateConfiguration("no elliptical solution")

    to_normalized = np.array([
        [1.0 / scale, 0.0, -mean[0] / scale],
        [0.0, 1.0 / scale, -mean[1] / scale],
        [0.0, 0.0, 1.0],
    ])
    pixel_conic = to_normalized.T @ conic_matrix(best) @ to_normalized
    return conic_to_ellipse(conic_coefficients(pixel_conic))


def _try_fit(points: NDArray[np.float64]) -> Optional[Ellipse]:
    try:
        return fit_ellipse_direct(points)
    except DegenerateConfiguration:
        return None


def _consensus_refit(ellipse: Ellipse, pool: NDArray[np.float64], cfg: CameraConfig,
                     rounds: Optional[int] = None) -> Ellipse:
    """Re-fits the ellipse to the pool points within tolerance of it until the support settles."""
    previous = None
    for _ in range(cfg.refine_rounds if rounds is None else rounds):
        _, distance, _ = closest_parametric_angle(ellipse, pool)
        within = distance <= cfg.inlier_tol_px
        if np.count_nonzero(within) < MIN_FIT_POINTS:
            break
        if previous is not None and np.array_equal(within, previous):
            break
        refit = _try_fit(pool[within])
        if refit is None:
            break
        ellipse, previous = refit, within
    return ellipse


def arc_span(ellipse: Ellipse, points: NDArray[np.float64], tol: float) -> float:
    """
    Share of the parametric angle of an ellipse covered by points on it.

    Gaps between angularly neighbouring points shorter than three tolerances
    of perimeter count as covered.
    """
    if len(points) == 0:
        return 0.0
    t, _, _ = closest_parametric_angle(ellipse, points)
    t = np.sort(t)
    gaps = np.diff(np.append(t, t[0] + 2 * math.pi))
    max_gap = 2 * math.pi * 3.0 * tol / ellipse.perimeter
    return float(1.0 - gaps[gaps > max_gap].sum() / (2 * math.pi))


def _outside_share(ellipse: Ellipse, points: NDArray[np.float64], tol: float) -> float:
    _, distance, inside = closest_parametric_angle(ellipse, points)
    return float(np.mean(~inside & (distance > tol)))


def _best_draw(points: NDArray[np.float64], active: NDArray[np.int64], cfg: CameraConfig,
               rng: np.random.Generator):
    best, best_sample, best_support = None, None, -1
    sample = None
    for _ in range(cfg.draws_per_round):
        sample = rng.choice(active, size=cfg.sample_size, replace=False)
        ellipse = _try_fit(points[sample])
        if ellipse is None:
            continue
        _, distance, _ = closest_parametric_angle(ellipse, points[active])
        support = int(np.count_nonzero(distance <= cfg.inlier_tol_px))
        if support > best_support:
            best, best_sample, best_support = ellipse, sample, support
    if best is None:
        return None, sample
    return best, best_sample


def initial_ellipse_detection(edges: EdgePointSet, cfg: CameraConfig,
                              rng: np.random.Generator) -> EllipseFit:
    """
    Finds an ellipse supported by the intact part of the edge set.

    Each round keeps the best-supported of `draws_per_round` random fits and
    refines it on its inliers. Points of a corrupted region sit inside the
    true outline, so when more than `interior_frac` of the active set lies
    inside the fit beyond the tolerance those points leave the active set and
    the round is repeated. A fit with no such interior points is accepted
    when its inliers cover `min_arc_coverage` of its perimeter; otherwise its
    inliers and sample are dropped. The active set shrinks every round.

    Args:
        edges (EdgePointSet): The edge set.
        cfg (CameraConfig): Detection settings.
        rng (np.random.Generator): Sampling generator.

    Returns:
        EllipseFit: The ellipse and the indices of all edge points within
        `inlier_tol_px` of it.

    Raises:
        Exhausted: If the active set runs out before an ellipse is accepted.
    """
    points = edges.points
    tol = cfg.inlier_tol_px
    active = np.arange(len(points))
    rounds = 0
    while len(active) >= cfg.sample_size:
        rounds += 1
        ellipse, sample = _best_draw(points, active, cfg, rng)
        if ellipse is None:
            active = active[~np.isin(active, sample)]
            continue
        ellipse = _consensus_refit(ellipse, points[active], cfg)
        _, distance, inside = closest_parametric_angle(ellipse, points[active])
        interior = inside & (distance > tol)
        if np.count_nonzero(interior) > cfg.interior_frac * len(active):
            active = active[~interior]
            continue
        on_boundary = distance <= tol
        if np.count_nonzero(on_boundary) >= cfg.min_arc_coverage * ellipse.perimeter:
            _, distance_all, _ = closest_parametric_angle(ellipse, points)
            inliers = np.flatnonzero(distance_all <= tol)
            logger.debug(f"Mask {edges.source_mask_id}: ellipse accepted after {rounds} rounds, "
                         f"{len(inliers)} of {len(points)} edge points on it")
            return EllipseFit(ellipse=ellipse, inlier_index=inliers, rounds=rounds)
        active = active[~(on_boundary | np.isin(active, sample))]
    raise Exhausted(f"edge set of {edges.source_mask_id} exhausted after {rounds} rounds")


def angle_histogram(ellipse: Ellipse, points: NDArray[np.float64], bins: int) -> AngleHistogram:
    """Bins points by the parametric angle of their closest ellipse point."""
    t, _, _ = closest_parametric_angle(ellipse, points)
    index = np.minimum((t / (2 * math.pi) * bins).astype(int), bins - 1)
    counts = np.bincount(index, minlength=bins)
    return AngleHistogram(bin_counts=[int(c) for c in counts], bin_count=bins)


def concentration_regions(occupied: NDArray[np.bool_]) -> list[ConcentrationRegion]:
    """Maximal circular runs of occupied bins, starting after the first empty bin."""
    bins = len(occupied)
    if occupied.all():
        return [ConcentrationRegion(bins=list(range(bins)))]
    start = int(np.flatnonzero(~occupied)[0])
    regions, run = [], []
    for step in range(1, bins + 1):
        i = (start + step) % bins
        if occupied[i]:
            run.append(i)
        elif run:
            regions.append(ConcentrationRegion(bins=run))
            run = []
    if run:
        regions.append(ConcentrationRegion(bins=run))
    return regions


def evaluate_ellipse(ellipse: Ellipse, inlier_points: NDArray[np.float64],
                     cfg: CameraConfig) -> EllipseEvaluation:
    """
    Checks whether the inliers spread evenly around the ellipse.

    Args:
        ellipse (Ellipse): The detected ellipse.
        inlier_points (NDArray): The inliers (the set P_e).
        cfg (CameraConfig): Uses `histogram_bins` and `min_bin_frac`.

    Returns:
        EllipseEvaluation: intact when every bin holds at least
        min_bin_frac * |P_e| / B points, otherwise the concentration regions.

    Raises:
        TooFewInliers: If there are fewer inliers than bins.
    """
    bins = cfg.histogram_bins
    if len(inlier_points) < bins:
        raise TooFewInliers(f"{len(inlier_points)} inliers for {bins} histogram bins")
    histogram = angle_histogram(ellipse, inlier_points, bins)
    threshold = cfg.min_bin_frac * len(inlier_points) / bins
    occupied = np.asarray(histogram.bin_counts) >= threshold
    if occupied.all():
        return EllipseEvaluation(intact=True, histogram=histogram)
    return EllipseEvaluation(intact=False, histogram=histogram, regions=concentration_regions(occupied))


def _rectified_ok(ellipse: Ellipse, points: NDArray[np.float64], fit: EllipseFit,
                  cfg: CameraConfig) -> bool:
    tol = cfg.inlier_tol_px
    _, distance, inside = closest_parametric_angle(ellipse, points)
    on_ellipse = distance <= tol
    if np.mean(~inside & ~on_ellipse) > cfg.outside_frac:
        return False
    if np.mean(on_ellipse[fit.inlier_index]) < cfg.min_support_frac:
        return False
    if np.count_nonzero(on_ellipse) < cfg.min_arc_coverage * ellipse.perimeter:
        return False
    return arc_span(ellipse, points[on_ellipse], tol) >= cfg.min_arc_span


def rectify_ellipse(edges: EdgePointSet, fit: EllipseFit, regions: Sequence[ConcentrationRegion],
                    cfg: CameraConfig, rng: np.random.Generator) -> Optional[EllipseFit]:
    """
    Re-fits a concentrated detection using evidence outside its inliers.

    Every iteration draws one edge point outside P_e plus `region_samples`
    points from each concentration region and fits them. The fit is refined
    by consensus over P_e and the edge points lying outside the initial
    ellipse; points strictly inside it belong to the damaged part of the
    outline and never enter the refit. An iteration passes when

    - at most `outside_frac` of the edge set lies outside the new ellipse
      beyond tolerance,
    - the ellipse keeps `min_support_frac` of P_e within tolerance,
    - its inliers number `min_arc_coverage` per pixel of perimeter,
    - and they span `min_arc_span` of its parametric angle.

    Args:
        edges (EdgePointSet): The full edge set P_s.
        fit (EllipseFit): The initial detection.
        regions (Sequence[ConcentrationRegion]): Regions from `evaluate_ellipse`.
        cfg (CameraConfig): Rectification settings.
        rng (np.random.Generator): Sampling generator.

    Returns:
        Optional[EllipseFit]: The first passing ellipse, None when every
        iteration fails.

    Raises:
        NoExteriorCandidates: If every edge point already belongs to P_e.
    """
    points = edges.points
    tol = cfg.inlier_tol_px
    exterior = np.setdiff1d(np.arange(len(points)), fit.inlier_index)
    if len(exterior) == 0:
        raise NoExteriorCandidates(f"no edge point of {edges.source_mask_id} lies off the ellipse")

    _, initial_distance, initial_inside = closest_parametric_angle(fit.ellipse, points)
    pool = points[~(initial_inside & (initial_distance > tol))]

    bins = cfg.histogram_bins
    t, _, _ = closest_parametric_angle(fit.ellipse, points[fit.inlier_index])
    inlier_bins = np.minimum((t / (2 * math.pi) * bins).astype(int), bins - 1)
    region_members = [fit.inlier_index[np.isin(inlier_bins, region.bins)] for region in regions]
    region_members = [members for members in region_members if len(members)]

    for iteration in range(1, cfg.rectify_iters + 1):
        sample = [int(rng.choice(exterior))]
        for members in region_members:
            take = min(cfg.region_samples, len(members))
            sample.extend(int(i) for i in rng.choice(members, size=take, replace=False))
        if len(sample) < MIN_FIT_POINTS:
            continue
        ellipse = _try_fit(points[sample])
        if ellipse is None:
            continue
        ellipse = _consensus_refit(ellipse, pool, cfg, rounds=max(cfg.refine_rounds, RECTIFY_REFINE_ROUNDS))
        if _rectified_ok(ellipse, points, fit, cfg):
            _, distance, _ = closest_parametric_angle(ellipse, points)
            logger.debug(f"Mask {edges.source_mask_id}: rectified at iteration {iteration}")
            return EllipseFit(ellipse=ellipse, inlier_index=np.flatnonzero(distance <= tol), rounds=iteration)
    return None


def compensate_center(e: Ellipse, K: CameraIntrinsics) -> Vec2Px:
    """
    Moves the ellipse center to the projection of the sphere center.

    Works in normalised image coordinates (focal length 1). With O the
    principal point, H the ellipse center and F, G the intersections of the
    ellipse with line OH, the sphere center ray bisects the angle FOG; OC is
    the tangent of that bisector and H moves by OH - OC toward O.

    Args:
        e (Ellipse): The outline ellipse in pixels.
        K (CameraIntrinsics): Camera intrinsics.

    Returns:
        Vec2Px: The compensated center in pixels.

    Raises:
        DegenerateGeometry: If line OH does not cross the ellipse.
    """
    H_px = e.center_array
    if np.linalg.norm(H_px - K.principal_point) < 1e-9:
        return H_px
    K_mat = K.matrix
    conic = K_mat.T @ conic_matrix(ellipse_to_conic(e)) @ K_mat
    H = np.linalg.solve(K_mat, np.array([H_px[0], H_px[1], 1.0]))[:2]
    OH = float(np.linalg.norm(H))
    d = H / OH

    direction = np.array([d[0], d[1], 0.0])
    origin = np.array([0.0, 0.0, 1.0])
    qa = direction @ conic @ direction
    qb = 2.0 * direction @ conic @ origin
    qc = origin @ conic @ origin
    disc = qb * qb - 4 * qa * qc
    if qa == 0 or disc < 0:
        raise DegenerateGeometry("line through the principal point misses the ellipse")
    root = math.sqrt(disc)
    s1, s2 = sorted(((-qb - root) / (2 * qa), (-qb + root) / (2 * qa)))

    if s1 > 0:
        # O outside the ellipse: F and G on the same side
        OF, OG = s1, s2
        OC = math.tan((math.atan(OF) + math.atan(OG)) / 2.0)
    else:
        # O inside: F on H's side, G opposite
        OF, OG = s2, -s1
        OC = math.tan((math.atan(OF) - math.atan(OG)) / 2.0)
    epsilon = OH - OC
    C = H - epsilon * d
    return np.array([K.fx * C[0] + K.cx, K.fy * C[1] + K.cy])


def _mean_residual(ellipse: Ellipse, points: NDArray[np.float64]) -> float:
    _, distance, _ = closest_parametric_angle(ellipse, points)
    return float(np.mean(distance)) if len(distance) else math.inf


def _invalid(edges: EdgePointSet, error: SphereCalibError, stage: str, histogram=None) -> EllipseDetection:
    return EllipseDetection(inlier_points=np.empty((0, 2)), verdict=VerdictEnum.INVALID,
                            reason=f"{error.code}: {error.detail}", failed_stage=stage,
                            histogram=histogram, source_mask_id=edges.source_mask_id)


def detect_ellipse(edges: EdgePointSet, cfg: CameraConfig,
                   rng: Optional[np.random.Generator] = None) -> EllipseDetection:
    """
    Runs initial detection, evaluation and, when needed, rectification on
    one edge set.

    Args:
        edges (EdgePointSet): The edge set of one mask.
        cfg (CameraConfig): Detection settings.
        rng (Optional[np.random.Generator]): Sampling generator, seeded from
            `cfg.rng_seed` when omitted.

    Returns:
        EllipseDetection: ValidIntact, ValidCorrupted or Invalid with the reason.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    try:
        fit = initial_ellipse_detection(edges, cfg, rng)
    except CameraPipelineError as error:
        return _invalid(edges, error, "initial")

    inlier_points = edges.points[fit.inlier_index]
    try:
        evaluation = evaluate_ellipse(fit.ellipse, inlier_points, cfg)
    except CameraPipelineError as error:
        return _invalid(edges, error, "evaluation")

    # an even spread only counts as intact when nothing sticks out of the ellipse
    if evaluation.intact and _outside_share(fit.ellipse, edges.points, cfg.inlier_tol_px) <= cfg.outside_frac:
        verdict = VerdictEnum.VALID_INTACT
    else:
        regions = evaluation.regions or concentration_regions(np.ones(cfg.histogram_bins, dtype=bool))
        try:
            rectified = rectify_ellipse(edges, fit, regions, cfg, rng)
        except CameraPipelineError as error:
            return _invalid(edges, error, "rectification", evaluation.histogram)
        if rectified is None:
            error = NoValidEllipse(f"{cfg.rectify_iters} rectification attempts rejected")
            return _invalid(edges, error, "rectification", evaluation.histogram)
        fit, verdict = rectified, VerdictEnum.VALID_CORRUPTED
        inlier_points = edges.points[fit.inlier_index]

    return EllipseDetection(
        ellipse=fit.ellipse,
        inlier_points=inlier_points,
        verdict=verdict,
        mean_residual=_mean_residual(fit.ellipse, inlier_points),
        histogram=evaluation.histogram,
        source_mask_id=edges.source_mask_id,
    )


def segment_masks(image: NDArray, threshold: int = 128, min_component_px: int = 30) -> list[NDArray[np.bool_]]:
    """
    Splits a grayscale image into one binary mask per bright connected component.

    Args:
        image (NDArray): Single-channel image.
        threshold (int): Pixels at or above this level are foreground.
        min_component_px (int): Smaller components are dropped.

    Returns:
        list[NDArray]: Boolean masks in label order.
    """
    labels, count = ndimage.label(np.asarray(image) >= threshold, structure=EIGHT_CONNECTED)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    return [labels == label for label in range(1, count + 1) if sizes[label] >= min_component_px]


def extract_ellipse_center(masks: Mapping[str, NDArray] | Sequence[NDArray], K: CameraIntrinsics,
                           cfg: CameraConfig, rng: Optional[np.random.Generator] = None) -> CameraExtraction:
    """
    Extracts the compensated sphere center from candidate masks.

    Each mask is processed independently; the valid detection with the
    smallest mean boundary residual wins.

    Args:
        masks (Mapping[str, NDArray] | Sequence[NDArray]): Candidate masks,
            keyed by identifier or in order.
        K (CameraIntrinsics): Camera intrinsics.
        cfg (CameraConfig): Detection settings.
        rng (Optional[np.random.Generator]): Parent generator, one child is
            spawned per mask.

    Returns:
        CameraExtraction: The compensated center and the winning detection.

    Raises:
        SphereCalibError: The stage error of a single rejected mask, or
            NoValidEllipse when several masks were all rejected. `stage` is set.
    """
    if not isinstance(masks, Mapping):
        masks = {f"mask_{i}": mask for i, mask in enumerate(masks)}
    if not masks:
        raise EmptyMask("no candidate masks", stage="edges")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    children = rng.spawn(len(masks))

    detections: list[EllipseDetection] = []
    failures: list[SphereCalibError] = []
    for (mask_id, mask), child in zip(masks.items(), children):
        try:
            edges = extract_edge_points(mask, mask_id)
        except CameraPipelineError as error:
            error.stage = "edges"
            failures.append(error)
            continue
        detection = detect_ellipse(edges, cfg, child)
        logger.info(f"Mask {mask_id}: {len(edges)} edge points, verdict {detection.verdict.value}"
                    + (f" ({detection.reason})" if detection.reason else ""))
        detections.append(detection)

    valid = [d for d in detections if d.is_valid]
    if not valid:
        if len(masks) == 1 and failures:
            raise failures[0]
        stage = detections[0].failed_stage if detections else "edges"
        raise NoValidEllipse(f"none of {len(masks)} masks holds a valid ellipse", stage=stage)

    best = min(valid, key=lambda d: d.mean_residual)
    try:
        center = compensate_center(best.ellipse, K)
    except SphereCalibError as error:
        error.stage = "compensation"
        raise
    return CameraExtraction(
        center=(float(center[0]), float(center[1])),
        ellipse=best.ellipse,
        verdict=best.verdict,
        mask_id=best.source_mask_id,
        mean_residual=best.mean_residual,
        masks_tried=len(masks),
    )
