import itertools
import math
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.transform import hough_circle, hough_circle_peaks

from app.models.config import LidarConfig, ScanModeEnum
from app.models.geometry import SphereParams
from app.models.lidar import (
    CellGrid,
    CircleDetection,
    ClusterStat,
    GroundSplit,
    HypothesisSet,
    LidarExtraction,
    PointCloud,
    RayCluster,
    SphereHypothesis,
)
from app.utilities.exceptions import (
    AllClustersRemoved,
    Degenerate,
    NoCircleFound,
    NoHypotheses,
    SphereCalibError,
    TooFewPoints,
)
from app.utilities.logger import logger

GROUND_MIN_ELEVATION = math.radians(60.0)
ADAPTIVE_EXTENT_FACTOR = 3.0
ADAPTIVE_EXTENT_FLOOR = 0.02
ROI_RADIUS_TOL_PX = 1.5
ROI_RADIUS_TOL_REL = 0.25
ROI_FIT_MIN_POINTS = 10
ROI_FIT_MAX_POINTS = 4000
ROI_FIT_TRIM = 0.3
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@contextmanager
def _stage(name: str):
    try:
        yield
    except SphereCalibError as error:
        error.stage = error.stage or name
        raise


def remove_statistical_outliers(cloud: PointCloud, k: int, m: float) -> PointCloud:
    """
    Statistical outlier removal.

    Args:
        cloud (PointCloud): Input cloud.
        k (int): Neighbours per point.
        m (float): Standard deviations above the mean neighbour distance
            that are still kept.

    Returns:
        PointCloud: Points whose mean k-NN distance is at most mu + m * sigma.

    Raises:
        TooFewPoints: If the cloud has k points or fewer.
    """
    if len(cloud) <= k:
        raise TooFewPoints(f"{len(cloud)} points for {k} neighbours")
    distances, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1)
    mean_distance = distances[:, 1:].mean(axis=1)
    threshold = mean_distance.mean() + m * mean_distance.std()
    keep = mean_distance <= threshold
    logger.debug(f"Outlier removal kept {np.count_nonzero(keep)} of {len(cloud)} points")
    return cloud.subset(keep)


def segment_ground(cloud: PointCloud, dist_thresh: float, cfg: LidarConfig,
                   rng: np.random.Generator) -> GroundSplit:
    """
    Removes the dominant near-horizontal plane by RANSAC.

    Only planes whose normal is at least 60 degrees above the horizon count
    as ground, and the consensus set must hold `ground_min_frac` of the cloud
    and span `ground_min_extent`. When no such plane exists the cloud is
    passed through with `ground_found=False`.

    Args:
        cloud (PointCloud): Input cloud, at least 3 points.
        dist_thresh (float): Point-to-plane distance of ground points.
        cfg (LidarConfig): RANSAC settings.
        rng (np.random.Generator): Sampling generator.

    Returns:
        GroundSplit: Ground and non-ground points.
    """
    points = cloud.points
    n = len(points)
    if n < 3:
        raise TooFewPoints(f"{n} points cannot define a plane")

    samples = rng.integers(0, n, size=(cfg.ground_ransac_iters, 3))
    best_count, best_plane = 0, None
    for a, b, c in samples:
        normal = np.cross(points[b] - points[a], points[c] - points[a])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        if abs(normal[2]) < math.sin(GROUND_MIN_ELEVATION):
            continue
        d = -normal @ points[a]
        count = np.count_nonzero(np.abs(points @ normal + d) <= dist_thresh)
        if count > best_count:
            best_count, best_plane = count, (normal, d)

    if best_plane is not None:
        normal, d = best_plane
        inliers = np.abs(points @ normal + d) <= dist_thresh
        support = points[inliers]
        centroid = support.mean(axis=0)
        _, _, vt = np.linalg.svd(support - centroid, full_matrices=False)
        refined = vt[-1] if vt[-1][2] >= 0 else -vt[-1]
        if abs(refined[2]) >= math.sin(GROUND_MIN_ELEVATION):
            normal, d = refined, -refined @ centroid
            inliers = np.abs(points @ normal + d) <= dist_thresh
        extent = float(np.ptp(points[inliers][:, :2], axis=0).max()) if inliers.any() else 0.0
        if np.count_nonzero(inliers) >= cfg.ground_min_frac * n and extent >= cfg.ground_min_extent:
            logger.info(f"Ground plane removed {np.count_nonzero(inliers)} of {n} points")
            plane = (tuple(float(x) for x in normal), float(d))
            return GroundSplit(ground=cloud.subset(inliers), nonground=cloud.subset(~inliers), plane=plane)

    logger.warning(f"No ground plane found in {n} points, passing the cloud through")
    return GroundSplit(ground=cloud.subset(np.zeros(n, dtype=bool)), nonground=cloud, ground_found=False)


def _spherical(points: NDArray[np.float64]):
    rho = np.linalg.norm(points, axis=1)
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    elevation = np.arctan2(points[:, 2], np.hypot(points[:, 0], points[:, 1]))
    return rho, azimuth, elevation


def range_image(points: NDArray[np.float64], res: float):
    """
    Projects points to a spherical range image keeping the minimum range per pixel.

    Returns:
        tuple: (image, rows, cols, rho) with inf at empty pixels; row 0 is the
        highest elevation.
    """
    rho, azimuth, elevation = _spherical(points)
    az_bin = np.round(azimuth / res).astype(np.int64)
    el_bin = np.round(elevation / res).astype(np.int64)
    cols = az_bin - az_bin.min()
    rows = el_bin.max() - el_bin
    image = np.full((rows.max() + 1, cols.max() + 1), np.inf)
    np.minimum.at(image, (rows, cols), rho)
    return image, rows, cols, rho


def range_image_edges(image: NDArray[np.float64], jump: float) -> NDArray[np.bool_]:
    """Occupancy boundary of the range image plus the near side of range jumps."""
    occupied = ndimage.binary_closing(np.isfinite(image), structure=EIGHT_CONNECTED)
    occupied |= np.isfinite(image)
    edges = occupied & ~ndimage.binary_erosion(occupied, structure=EIGHT_CONNECTED, border_value=0)
    for axis in (0, 1):
        a = image[:-1, :] if axis == 0 else image[:, :-1]
        b = image[1:, :] if axis == 0 else image[:, 1:]
        with np.errstate(invalid="ignore"):
            step = np.isfinite(a) & np.isfinite(b) & (np.abs(a - b) > jump)
        near_a = step & (a < b)
        near_b = step & (b < a)
        if axis == 0:
            edges[:-1, :] |= near_a
            edges[1:, :] |= near_b
        else:
            edges[:, :-1] |= near_a
            edges[:, 1:] |= near_b
    return edges


def _apparent_radius_px(rho, radius: float, res: float):
    ratio = np.clip(radius / np.asarray(rho, dtype=np.float64), 0.0, 1.0)
    return np.arcsin(ratio) / res


def _algebraic_sphere(points: NDArray[np.float64]):
    mean = points.mean(axis=0)
    centered = points - mean
    design = np.column_stack([2.0 * centered, np.ones(len(points))])
    solution, _, rank, _ = np.linalg.lstsq(design, np.sum(centered ** 2, axis=1), rcond=None)
    if rank < 4:
        return None
    center = solution[:3]
    radius_sq = solution[3] + center @ center
    if not radius_sq > 0:
        return None
    return center + mean, math.sqrt(radius_sq)


def _sphere_evidence(points: NDArray[np.float64], radius: float, cfg: LidarConfig) -> bool:
    """
    Whether the points inside a Hough circle are the visible side of a sphere.

    A free-radius sphere is fitted, points farther than `ROI_FIT_TRIM` radii
    from it are dropped and the fit is repeated. The circle holds a sphere
    when the fitted radius is within `roi_fit_radius_tol` of the known one,
    the median residual is at most `roi_fit_residual` radii and the center
    lies behind the points. Planar faces and box corners fail the radius or
    residual test.
    """
    if len(points) < ROI_FIT_MIN_POINTS:
        return False
    points = points[::max(1, len(points) // ROI_FIT_MAX_POINTS)]
    fit = _algebraic_sphere(points)
    if fit is None:
        return False
    center, fitted = fit
    kept = np.abs(np.linalg.norm(points - center, axis=1) - fitted) <= ROI_FIT_TRIM * radius
    if np.count_nonzero(kept) < max(ROI_FIT_MIN_POINTS, len(points) // 2):
        return False
    fit = _algebraic_sphere(points[kept])
    if fit is None:
        return False
    center, fitted = fit
    residual = np.abs(np.linalg.norm(points[kept] - center, axis=1) - fitted)
    behind = np.linalg.norm(center) > np.median(np.linalg.norm(points[kept], axis=1))
    return bool(abs(fitted - radius) <= cfg.roi_fit_radius_tol * radius
                and np.median(residual) <= cfg.roi_fit_residual * radius
                and behind)


def detect_sphere_roi(nonground: PointCloud, cfg: LidarConfig,
                      radius_hint: Optional[float] = None) -> tuple[PointCloud, CircleDetection]:
    """
    Isolates the sphere with a circle Hough transform on the range image.

    The radius band follows from the hint and the ranges present in the
    cloud. Peaks whose radius disagrees with the radius the hint predicts at
    their median range are discarded, and so are peaks whose points do not
    fit a sphere of the hint's radius (see `_sphere_evidence`). The best
    remaining peak wins.

    Args:
        nonground (PointCloud): Cloud without ground.
        cfg (LidarConfig): ROI settings.
        radius_hint (Optional[float]): Sphere radius, `cfg.radius_known` by default.

    Returns:
        tuple[PointCloud, CircleDetection]: The ROI points and the circle.

    Raises:
        TooFewPoints: If the cloud is empty.
        NoCircleFound: If no circle scoring `hough_min_score` holds a sphere.
    """
    if len(nonground) == 0:
        raise TooFewPoints("no non-ground points")
    radius = radius_hint or cfg.radius_known
    res = cfg.range_image_res
    image, rows, cols, rho = range_image(nonground.points, res)
    edges = range_image_edges(image, cfg.roi_range_jump)
    # one pixel of slack for digitised outlines
    edges = ndimage.binary_dilation(edges, structure=EIGHT_CONNECTED)

    beyond = rho[rho > radius]
    if len(beyond) == 0:
        raise NoCircleFound("every point lies within one radius of the sensor")
    largest = min(float(_apparent_radius_px(beyond.min(), radius, res)), min(image.shape) / 2.0)
    smallest = float(_apparent_radius_px(beyond.max(), radius, res))
    radii = np.arange(max(2, math.floor(smallest)), max(2, math.ceil(largest)) + 1)
    hspaces = hough_circle(edges, radii, normalize=True)
    accums, centers_col, centers_row, peak_radii = hough_circle_peaks(
        hspaces, radii, threshold=cfg.hough_min_score, total_num_peaks=cfg.hough_peaks)

    grid_rows, grid_cols = np.indices(image.shape)
    best: Optional[CircleDetection] = None
    rejected = 0
    for score, col, row, r_px in zip(accums, centers_col, centers_row, peak_radii):
        if score < cfg.hough_min_score or (best is not None and score <= best.score):
            continue
        inside = ((grid_rows - row) ** 2 + (grid_cols - col) ** 2 <= r_px ** 2) & np.isfinite(image)
        if not inside.any():
            continue
        median_range = float(np.median(image[inside]))
        predicted = float(_apparent_radius_px(median_range, radius, res))
        if abs(r_px - predicted) > ROI_RADIUS_TOL_PX + ROI_RADIUS_TOL_REL * predicted:
            continue
        members = ((rows - row) ** 2 + (cols - col) ** 2 <= r_px ** 2) \
            & (np.abs(rho - median_range) <= cfg.roi_range_factor * radius)
        if not _sphere_evidence(nonground.points[members], radius, cfg):
            rejected += 1
            continue
        best = CircleDetection(row=int(row), col=int(col), radius_px=float(r_px),
                               score=float(score), median_range=median_range)

    if best is None:
        raise NoCircleFound(f"none of {len(accums)} circles scoring {cfg.hough_min_score} holds a sphere "
                            f"of radius {radius} ({rejected} failed the sphere fit)")

    in_circle = (rows - best.row) ** 2 + (cols - best.col) ** 2 <= (best.radius_px + cfg.roi_margin_px) ** 2
    in_range = np.abs(rho - best.median_range) <= cfg.roi_range_factor * radius
    roi = nonground.subset(in_circle & in_range)
    logger.info(f"Sphere ROI: circle r={best.radius_px:.0f}px score={best.score:.2f} "
                f"at {best.median_range:.2f} m, {len(roi)} points")
    return roi, best


def cluster_along_rays(roi: PointCloud, az_res: float, el_res: float) -> list[RayCluster]:
    """
    Groups points by (azimuth, elevation) bin.

    Bins are centred on integer multiples of the resolution. Clusters come
    out sorted by (azimuth bin, elevation bin).

    Args:
        roi (PointCloud): ROI points.
        az_res (float): Azimuth bin size in radians.
        el_res (float): Elevation bin size in radians.

    Returns:
        list[RayCluster]: One cluster per occupied bin.
    """
    if len(roi) == 0:
        return []
    rho, azimuth, elevation = _spherical(roi.points)
    keys = np.column_stack([np.round(azimuth / az_res), np.round(elevation / el_res)]).astype(np.int64)
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse, minlength=len(unique_keys)))[:-1]

    clusters = []
    for (az_bin, el_bin), members in zip(unique_keys, np.split(order, splits)):
        az, el = az_bin * az_res, el_bin * el_res
        direction = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        ranges = rho[members]
        clusters.append(RayCluster(
            direction=direction,
            members=roi.points[members],
            radial_extent=float(ranges.max() - ranges.min()),
            azimuth_bin=int(az_bin),
            elevation_bin=int(el_bin),
        ))
    return clusters


def adaptive_extent_threshold(clusters: Sequence[RayCluster]) -> float:
    """Three times the median cluster extent, at least 2 cm."""
    if not clusters:
        return ADAPTIVE_EXTENT_FLOOR
    median = float(np.median([c.radial_extent for c in clusters]))
    return max(ADAPTIVE_EXTENT_FACTOR * median, ADAPTIVE_EXTENT_FLOOR)


def filter_noisy_clusters(clusters: Sequence[RayCluster], extent_thresh: Optional[float] = None,
                          min_cluster_pts: int = 3) -> list[RayCluster]:
    """
    Drops long or sparse clusters.

    Args:
        clusters (Sequence[RayCluster]): Ray clusters.
        extent_thresh (Optional[float]): Maximum radial extent, adaptive when None.
        min_cluster_pts (int): Minimum member count.

    Returns:
        list[RayCluster]: Surviving clusters in input order.

    Raises:
        AllClustersRemoved: If nothing survives.
    """
    thresh = extent_thresh if extent_thresh is not None else adaptive_extent_threshold(clusters)
    kept = [c for c in clusters if c.radial_extent <= thresh and len(c) >= min_cluster_pts]
    if not kept:
        raise AllClustersRemoved(f"all {len(clusters)} clusters exceed {thresh:.4f} m "
                                 f"or hold fewer than {min_cluster_pts} points")
    logger.debug(f"Cluster filter kept {len(kept)} of {len(clusters)} at {thresh:.4f} m")
    return kept


def cell_grid(cluster: RayCluster, M: int) -> CellGrid:
    """
    Splits the cluster's range span into M equal cells.

    Args:
        cluster (RayCluster): The cluster, at least one member.
        M (int): Cell count.

    Returns:
        CellGrid: Counts per cell; occupied cells sit at their member centroid.
    """
    ranges = np.linalg.norm(cluster.members, axis=1)
    low, high = ranges.min(), ranges.max()
    width = (high - low) / M
    if width > 0:
        index = np.minimum(((ranges - low) / width).astype(np.int64), M - 1)
    else:
        index = np.zeros(len(ranges), dtype=np.int64)
    counts = np.bincount(index, minlength=M)
    sums = np.zeros((M, 3))
    np.add.at(sums, index, cluster.members)
    midpoints = low + (np.arange(M) + 0.5) * width
    centers = np.outer(midpoints, cluster.direction)
    occupied = counts > 0
    centers[occupied] = sums[occupied] / counts[occupied, None]
    return CellGrid(M=M, cell_centers=centers, counts=counts)


def representative_point(cluster: RayCluster, M: int) -> NDArray[np.float64]:
    """Frequency-weighted mean of the cell locations, sum(n_i c_i) / sum(n_i)."""
    grid = cell_grid(cluster, M)
    return (grid.counts[:, None] * grid.cell_centers).sum(axis=0) / grid.counts.sum()


def voxel_representatives(roi: PointCloud, voxel: float) -> NDArray[np.float64]:
    """
    Centroid of every occupied voxel.

    Args:
        roi (PointCloud): ROI points.
        voxel (float): Voxel edge length in meters.

    Returns:
        NDArray: (V, 3) centroids in lexicographic voxel order.
    """
    if len(roi) == 0:
        return np.empty((0, 3))
    keys = np.floor(roi.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, roi.points)
    return sums / counts[:, None]


def fit_spheres_batch(quads: NDArray[np.float64], coplanar_tol: float = 1e-6):
    """
    Solves the sphere through each of many point quadruples.

    Each quadruple is centred on its centroid and the 4x4 system
    x^2 + y^2 + z^2 = A x + B y + C z + D is solved exactly.

    Args:
        quads (NDArray): (H, 4, 3) quadruples.
        coplanar_tol (float): Threshold on |det| / (RMS pairwise distance)^3.

    Returns:
        tuple[NDArray, NDArray, NDArray]: Centers (H, 3), radii (H,) and a
        validity mask (H,); invalid rows hold NaN.
    """
    quads = np.asarray(quads, dtype=np.float64).reshape(-1, 4, 3)
    mean = quads.mean(axis=1, keepdims=True)
    q = quads - mean
    system = np.concatenate([q, np.ones(q.shape[:2] + (1,))], axis=2)
    rhs = np.sum(q * q, axis=2)

    diffs = q[:, :, None, :] - q[:, None, :, :]
    pair_sq = np.sum(diffs ** 2, axis=3)
    rms_pairwise = np.sqrt(pair_sq[:, np.triu_indices(4, k=1)[0], np.triu_indices(4, k=1)[1]].mean(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        conditioning = np.abs(np.linalg.det(system)) / rms_pairwise ** 3
    valid = np.isfinite(conditioning) & (conditioning >= coplanar_tol)

    centers = np.full((len(quads), 3), np.nan)
    radii = np.full(len(quads), np.nan)
    if valid.any():
        solution = np.linalg.solve(system[valid], rhs[valid][:, :, None])[:, :, 0]
        local_center = solution[:, :3] / 2.0
        radius_sq = solution[:, 3] + np.sum(local_center ** 2, axis=1)
        ok = radius_sq > 0
        index = np.flatnonzero(valid)
        centers[index[ok]] = local_center[ok] + mean[index[ok], 0]
        radii[index[ok]] = np.sqrt(radius_sq[ok])
        valid[index[~ok]] = False
    return centers, radii, valid


def fit_sphere_4pts(p1, p2, p3, p4, coplanar_tol: float = 1e-6,
                    source: tuple[int, int, int, int] = (0, 1, 2, 3)) -> SphereHypothesis:
    """
    Sphere through four points.

    Raises:
        Degenerate: If the points are coplanar within `coplanar_tol` or the
            solution has no real radius.
    """
    quad = np.array([p1, p2, p3, p4], dtype=np.float64)
    centers, radii, valid = fit_spheres_batch(quad[None], coplanar_tol)
    if not valid[0]:
        raise Degenerate("points are coplanar")
    return SphereHypothesis(params=SphereParams(center=centers[0], radius=float(radii[0])), source=source)


def _sample_combinations(n: int, cap: int, rng: np.random.Generator) -> NDArray[np.int64]:
    """Unique sorted 4-tuples drawn uniformly by rejection, in lexicographic order."""
    drawn = np.empty((0, 4), dtype=np.int64)
    while True:
        batch = np.sort(rng.integers(0, n, size=(int(cap * 1.2) + 16, 4)), axis=1)
        batch = batch[np.all(np.diff(batch, axis=1) > 0, axis=1)]
        drawn = np.vstack([drawn, batch])
        unique, first = np.unique(drawn, axis=0, return_index=True)
        if len(unique) >= cap:
            chosen = unique[np.sort(np.argsort(first, kind="stable")[:cap])]
            return chosen
        drawn = drawn[np.sort(first)]


def enumerate_sphere_hypotheses(reps: NDArray[np.float64], known_r: float, r_tol: float, cap: int,
                                coplanar_tol: float = 1e-6, rng: Optional[np.random.Generator] = None,
                                chunk: int = 50_000) -> HypothesisSet:
    """
    Fits a sphere to 4-point combinations of the representatives and keeps
    those whose radius matches the target.

    All C(n, 4) combinations are used when that count is at most `cap`,
    otherwise `cap` distinct combinations are drawn with `rng`.

    Args:
        reps (NDArray): (n, 3) representative points, n >= 4.
        known_r (float): Target radius.
        r_tol (float): Allowed radius deviation.
        cap (int): Maximum number of combinations.
        coplanar_tol (float): Degeneracy threshold.
        rng (Optional[np.random.Generator]): Generator for the capped path.
        chunk (int): Combinations solved per batch.

    Returns:
        HypothesisSet: Gated hypotheses ordered by combination.

    Raises:
        NoHypotheses: If fewer than four representatives are given or no
            combination passes the gate.
    """
    reps = np.asarray(reps, dtype=np.float64).reshape(-1, 3)
    n = len(reps)
    if n < 4:
        raise NoHypotheses(f"{n} representatives cannot define a sphere")
    total = math.comb(n, 4)
    if total <= cap:
        combos = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(n), 4)),
                             dtype=np.int64, count=4 * total).reshape(-1, 4)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        combos = _sample_combinations(n, cap, rng)

    centers, radii, sources = [], [], []
    for start in range(0, len(combos), chunk):
        block = combos[start:start + chunk]
        c, r, valid = fit_spheres_batch(reps[block], coplanar_tol)
        gate = valid & (np.abs(r - known_r) <= r_tol)
        centers.append(c[gate])
        radii.append(r[gate])
        sources.append(block[gate])
    centers, radii, sources = np.vstack(centers), np.concatenate(radii), np.vstack(sources)
    if len(radii) == 0:
        raise NoHypotheses(f"none of {len(combos)} combinations has radius {known_r} +/- {r_tol}")
    logger.info(f"{len(radii)} of {len(combos)} sphere hypotheses passed the radius gate")
    return HypothesisSet(centers=centers, radii=radii, sources=sources, tried=len(combos))


def fuse_centers(hyps: HypothesisSet | Sequence[SphereHypothesis], bin_size: float,
                 fuse_radius: float) -> NDArray[np.float64]:
    """
    Density-weighted fusion of hypothesis centers.

    Centers are binned on a grid of edge `bin_size`; the result is the
    count-weighted mean of the bin centroids lying within `fuse_radius` of
    the most populated bin's centroid.

    Args:
        hyps (HypothesisSet | Sequence[SphereHypothesis]): At least one hypothesis.
        bin_size (float): Grid edge length in meters.
        fuse_radius (float): Neighbourhood of the modal bin in meters.

    Returns:
        NDArray: The fused center.
    """
    if isinstance(hyps, HypothesisSet):
        centers = hyps.centers
    else:
        centers = np.array([h.params.center for h in hyps], dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        raise NoHypotheses("nothing to fuse")
    keys = np.floor(centers / bin_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, centers)
    centroids = sums / counts[:, None]
    modal = centroids[np.argmax(counts)]
    near = np.linalg.norm(centroids - modal, axis=1) <= fuse_radius
    weights = counts[near].astype(np.float64)
    return (weights[:, None] * centroids[near]).sum(axis=0) / weights.sum()


def _cluster_stats(clusters: Sequence[RayCluster], kept: Sequence[RayCluster], cfg: LidarConfig):
    kept_bins = {(c.azimuth_bin, c.elevation_bin) for c in kept}
    return [
        ClusterStat(
            azimuth=c.azimuth_bin * cfg.az_res,
            elevation=c.elevation_bin * cfg.el_res,
            members=len(c),
            extent=c.radial_extent,
            kept=(c.azimuth_bin, c.elevation_bin) in kept_bins,
        )
        for c in clusters
    ]


def center_from_representatives(reps: NDArray[np.float64], cfg: LidarConfig,
                                rng: Optional[np.random.Generator] = None,
                                known_r: Optional[float] = None):
    """
    Runs hypothesis enumeration and fusion on representative points.

    Returns:
        tuple[NDArray, HypothesisSet]: The fused center and the hypotheses.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    with _stage("hypotheses"):
        hyps = enumerate_sphere_hypotheses(reps, known_r or cfg.radius_known, cfg.radius_tol,
                                           cfg.combo_cap, cfg.coplanar_tol, rng)
    with _stage("fusion"):
        center = fuse_centers(hyps, cfg.fuse_bin, cfg.fuse_radius)
    return center, hyps


def center_from_points(points: PointCloud | NDArray[np.float64], mode: ScanModeEnum, cfg: LidarConfig,
                       rng: Optional[np.random.Generator] = None,
                       known_r: Optional[float] = None) -> LidarExtraction:
    """
    Runs the pipeline from representatives onward on pre-segmented sphere points.

    Spinning and solid-state clouds go through ray clustering and cell
    representatives, non-repetitive clouds through voxel centroids.

    Args:
        points (PointCloud | NDArray): Sphere points in the LiDAR frame.
        mode (ScanModeEnum): Scan pattern family.
        cfg (LidarConfig): Pipeline settings.
        rng (Optional[np.random.Generator]): Generator for capped enumeration.
        known_r (Optional[float]): Target radius, `cfg.radius_known` by default.

    Returns:
        LidarExtraction: The fused center and counts.
    """
    roi = points if isinstance(points, PointCloud) else PointCloud(points=points)
    stats: list[ClusterStat] = []
    if ScanModeEnum(mode) == ScanModeEnum.NON_REPETITIVE:
        with _stage("representatives"):
            reps = voxel_representatives(roi, cfg.voxel_size)
    else:
        with _stage("clustering"):
            clusters = cluster_along_rays(roi, cfg.az_res, cfg.el_res)
        with _stage("filtering"):
            kept = filter_noisy_clusters(clusters, cfg.extent_thresh, cfg.min_cluster_pts)
        stats = _cluster_stats(clusters, kept, cfg)
        with _stage("representatives"):
            reps = np.array([representative_point(c, cfg.cells_M) for c in kept])
    center, hyps = center_from_representatives(reps, cfg, rng, known_r)
    return LidarExtraction(
        center=tuple(float(x) for x in center),
        roi_points=len(roi),
        representatives=len(reps),
        hypotheses=len(hyps),
        clusters=stats,
    )


def extract_sphere_center(cloud: PointCloud, mode: ScanModeEnum, known_r: Optional[float],
                          cfg: LidarConfig, rng: Optional[np.random.Generator] = None) -> LidarExtraction:
    """
    Full LiDAR pipeline: outlier removal, ground removal, ROI, representatives,
    hypotheses and fusion.

    Args:
        cloud (PointCloud): Accumulated cloud in the LiDAR frame.
        mode (ScanModeEnum): Scan pattern family.
        known_r (Optional[float]): Target radius, `cfg.radius_known` when None.
        cfg (LidarConfig): Pipeline settings.
        rng (Optional[np.random.Generator]): Generator, seeded from
            `cfg.rng_seed` when omitted.

    Returns:
        LidarExtraction: The sphere center and diagnostics.

    Raises:
        SphereCalibError: Any stage error, with `stage` set.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    radius = known_r or cfg.radius_known
    with _stage("sor"):
        filtered = remove_statistical_outliers(cloud, cfg.sor_k, cfg.sor_m)
    with _stage("ground"):
        split = segment_ground(filtered, cfg.ground_dist_thresh, cfg, rng)
    with _stage("roi"):
        roi, _ = detect_sphere_roi(split.nonground, cfg, radius)
    extraction = center_from_points(roi, mode, cfg, rng, radius)
    logger.info(f"Sphere center ({extraction.center[0]:.4f}, {extraction.center[1]:.4f}, "
                f"{extraction.center[2]:.4f}) from {extraction.representatives} representatives")
    return extraction.model_copy(update={"ground_found": split.ground_found})
