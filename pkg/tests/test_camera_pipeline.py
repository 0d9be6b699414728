import math

import numpy as np
import pytest

from app.helpers.camera_pipeline import (
    angle_histogram,
    arc_span,
    compensate_center,
    concentration_regions,
    detect_ellipse,
    evaluate_ellipse,
    extract_edge_points,
    extract_ellipse_center,
    fit_ellipse_direct,
    initial_ellipse_detection,
    rectify_ellipse,
    segment_masks,
)
from app.helpers.geometry import project_point, sphere_outline_ellipse
from app.helpers.scene_simulator import apply_corruption, rasterize_outline, render_decoy
from app.models.camera import ConcentrationRegion, EdgePointSet, EllipseFit, VerdictEnum
from app.models.geometry import CameraIntrinsics, Ellipse, SphereParams
from app.models.scene import CorruptionSpec, OccluderBlob
from app.utilities.exceptions import (
    DegenerateConfiguration,
    EmptyMask,
    Exhausted,
    NoExteriorCandidates,
    TooFewEdgePoints,
    TooFewInliers,
)


def _ellipse_points(ellipse: Ellipse, count: int, start: float = 0.0, stop: float = 2 * math.pi):
    t = np.linspace(start, stop, count, endpoint=False)
    c, s = math.cos(ellipse.angle), math.sin(ellipse.angle)
    local = np.column_stack([ellipse.semi_major * np.cos(t), ellipse.semi_minor * np.sin(t)])
    return local @ np.array([[c, -s], [s, c]]).T + ellipse.center_array


def _sphere_mask(K, center, radius=0.2):
    sphere = SphereParams(center=center, radius=radius)
    outline = sphere_outline_ellipse(sphere, K)
    return rasterize_outline(outline, K), outline, project_point(sphere.center_array, K)


def _brute_force_boundary(mask):
    padded = np.pad(mask, 1)
    rows, cols = mask.shape
    boundary = set()
    for r in range(rows):
        for c in range(cols):
            if mask[r, c] and not padded[r:r + 3, c:c + 3].all():
                boundary.add((c, r))
    return boundary


def test_edge_points_of_square():
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[5:15, 5:15] = 255
    edges = extract_edge_points(mask, "square")
    assert len(edges) == 36
    assert edges.source_mask_id == "square"
    assert tuple(edges.points[0]) == (5.0, 5.0)


def test_edge_points_match_neighbourhood_oracle(K):
    mask, _, _ = _sphere_mask(K, (0.1, 0.05, 2.0))
    edges = extract_edge_points(mask)
    assert {tuple(int(v) for v in p) for p in edges.points} == _brute_force_boundary(mask)


def test_edge_points_in_raster_order():
    mask = np.zeros((30, 30), dtype=bool)
    mask[3:20, 8:25] = True
    points = extract_edge_points(mask).points
    keys = points[:, 1] * 1000 + points[:, 0]
    assert np.all(np.diff(keys) > 0)


def test_empty_mask():
    with pytest.raises(EmptyMask):
        extract_edge_points(np.zeros((10, 10)))


def test_tiny_mask_has_too_few_edge_points():
    mask = np.zeros((10, 10))
    mask[4, 4] = 1
    with pytest.raises(TooFewEdgePoints):
        extract_edge_points(mask)


def test_direct_fit_recovers_exact_ellipse():
    truth = Ellipse(center=(100.0, 80.0), semi_major=40.0, semi_minor=20.0, angle=0.5)
    fitted = fit_ellipse_direct(_ellipse_points(truth, 50))
    np.testing.assert_allclose(fitted.center, truth.center, atol=1e-6)
    assert fitted.semi_major == pytest.approx(40.0, abs=1e-6)
    assert fitted.semi_minor == pytest.approx(20.0, abs=1e-6)
    assert fitted.angle == pytest.approx(0.5, abs=1e-6)


def test_direct_fit_from_partial_arc():
    truth = Ellipse(center=(-20.0, 35.0), semi_major=25.0, semi_minor=18.0, angle=2.0)
    fitted = fit_ellipse_direct(_ellipse_points(truth, 12, 0.0, math.pi))
    np.testing.assert_allclose(fitted.center, truth.center, atol=1e-6)


def test_direct_fit_rejects_collinear_points():
    points = np.column_stack([np.arange(10.0), 2.0 * np.arange(10.0) + 1.0])
    with pytest.raises(DegenerateConfiguration):
        fit_ellipse_direct(points)


def test_direct_fit_needs_five_points():
    with pytest.raises(DegenerateConfiguration):
        fit_ellipse_direct(np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]]))


def test_angle_histogram_of_uniform_points():
    circle = Ellipse(center=(0.0, 0.0), semi_major=10.0, semi_minor=10.0)
    histogram = angle_histogram(circle, _ellipse_points(circle, 120, 0.01, 2 * math.pi + 0.01), 12)
    assert histogram.bin_counts == [10] * 12
    assert histogram.total == 120


def test_concentration_regions_wrap_around():
    occupied = np.array([True, True, False, False, True, False])
    assert [r.bins for r in concentration_regions(occupied)] == [[4], [0, 1]]


def test_concentration_regions_of_full_histogram():
    assert [r.bins for r in concentration_regions(np.ones(4, dtype=bool))] == [[0, 1, 2, 3]]


def test_evaluate_intact_and_concentrated(camera_cfg):
    circle = Ellipse(center=(50.0, 50.0), semi_major=20.0, semi_minor=20.0)
    assert evaluate_ellipse(circle, _ellipse_points(circle, 240, 0.01, 2 * math.pi + 0.01), camera_cfg).intact
    half = evaluate_ellipse(circle, _ellipse_points(circle, 120, 0.01, math.pi - 0.01), camera_cfg)
    assert not half.intact
    assert [r.bins for r in half.regions] == [[0, 1, 2, 3, 4, 5]]


def test_evaluate_needs_one_inlier_per_bin(camera_cfg):
    circle = Ellipse(center=(0.0, 0.0), semi_major=5.0, semi_minor=5.0)
    with pytest.raises(TooFewInliers):
        evaluate_ellipse(circle, _ellipse_points(circle, 6), camera_cfg)


def test_compensation_on_axis_is_identity(K):
    outline = sphere_outline_ellipse(SphereParams(center=(0.0, 0.0, 3.0), radius=0.1), K)
    np.testing.assert_allclose(compensate_center(outline, K), [320.0, 240.0], atol=1e-9)


@pytest.mark.parametrize("center", [
    (0.02, 0.01, 2.0),   # principal point inside the outline
    (1.0, 0.5, 3.0),     # principal point outside the outline
    (-0.8, 0.3, 2.5),
])
def test_compensation_recovers_projected_center(K, center):
    sphere = SphereParams(center=center, radius=0.1)
    outline = sphere_outline_ellipse(sphere, K)
    truth = project_point(sphere.center_array, K)
    assert np.linalg.norm(outline.center_array - truth) > 1e-3
    np.testing.assert_allclose(compensate_center(outline, K), truth, atol=1e-6)


def test_compensation_closure_over_random_poses(K, rng):
    for _ in range(200):
        radius = rng.uniform(0.05, 0.3)
        depth = rng.uniform(1.0, 6.0)
        lateral = rng.uniform(-0.5, 0.5, 2) * depth
        sphere = SphereParams(center=(lateral[0], lateral[1], depth), radius=radius)
        outline = sphere_outline_ellipse(sphere, K)
        truth = project_point(sphere.center_array, K)
        assert np.linalg.norm(compensate_center(outline, K) - truth) < 1e-6


def test_detects_intact_sphere_mask(K, camera_cfg):
    mask, _, truth = _sphere_mask(K, (0.3, 0.2, 2.5))
    detection = detect_ellipse(extract_edge_points(mask), camera_cfg, np.random.default_rng(0))
    assert detection.verdict == VerdictEnum.VALID_INTACT
    assert detection.mean_residual < 1.0
    np.testing.assert_allclose(compensate_center(detection.ellipse, K), truth, atol=1.0)


def test_detects_truncated_sphere_mask(K, camera_cfg):
    mask, outline, truth = _sphere_mask(K, (0.3, 0.2, 2.5))
    truncated = apply_corruption(mask, outline, CorruptionSpec(truncation_frac=0.25, truncation_angle=1.0),
                                 np.random.default_rng(0))
    detection = detect_ellipse(extract_edge_points(truncated), camera_cfg, np.random.default_rng(0))
    assert detection.verdict == VerdictEnum.VALID_CORRUPTED
    assert np.linalg.norm(compensate_center(detection.ellipse, K) - truth) < 2.0


@pytest.mark.parametrize("shape", ["rectangle", "triangle"])
@pytest.mark.parametrize("seed", range(12))
def test_decoys_are_invalid(K, camera_cfg, shape, seed):
    rng = np.random.default_rng(seed)
    # semi-major between 25 and 45 px
    depth = rng.uniform(2.3, 4.0)
    _, outline, _ = _sphere_mask(K, (rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), depth))
    decoy = render_decoy(outline, shape, K, rng)
    detection = detect_ellipse(extract_edge_points(decoy), camera_cfg, np.random.default_rng(seed))
    assert detection.verdict == VerdictEnum.INVALID, detection.ellipse
    assert detection.reason


def test_detection_is_deterministic(K, camera_cfg):
    mask, _, _ = _sphere_mask(K, (-0.2, 0.1, 3.0))
    edges = extract_edge_points(mask)
    first = detect_ellipse(edges, camera_cfg, np.random.default_rng(5))
    second = detect_ellipse(edges, camera_cfg, np.random.default_rng(5))
    assert first.ellipse == second.ellipse


def test_extract_center_picks_the_sphere_among_masks(K, camera_cfg):
    mask, _, truth = _sphere_mask(K, (0.3, 0.2, 2.5))
    blank = np.zeros_like(mask)
    extraction = extract_ellipse_center({"blank": blank, "sphere": mask}, K, camera_cfg)
    assert extraction.mask_id == "sphere"
    assert extraction.masks_tried == 2
    np.testing.assert_allclose(extraction.center, truth, atol=1.0)


def test_extract_center_reports_the_failing_stage(K, camera_cfg):
    with pytest.raises(EmptyMask) as info:
        extract_ellipse_center([np.zeros((50, 50))], K, camera_cfg)
    assert info.value.stage == "edges"


def test_segment_masks_drops_small_components():
    image = np.zeros((60, 60), dtype=np.uint8)
    image[5:25, 5:25] = 200
    image[40:43, 40:43] = 255
    masks = segment_masks(image, threshold=128, min_component_px=30)
    assert len(masks) == 1
    assert masks[0].sum() == 400


def test_arc_span_of_full_and_partial_arcs():
    circle = Ellipse(center=(80.0, 80.0), semi_major=40.0, semi_minor=40.0)
    assert arc_span(circle, _ellipse_points(circle, 300), 2.0) == pytest.approx(1.0)
    assert arc_span(circle, _ellipse_points(circle, 150, 0.0, math.pi), 2.0) == pytest.approx(0.5, abs=0.02)
    assert arc_span(circle, np.empty((0, 2)), 2.0) == 0.0


@pytest.mark.slow
def test_truncated_masks_are_rectified_without_bias(K, camera_cfg):
    rng = np.random.default_rng(11)
    hits, cases = 0, 40
    for case in range(cases):
        depth = rng.uniform(2.0, 3.5)
        center = (rng.uniform(-0.4, 0.4) * depth / 2.0, rng.uniform(-0.3, 0.3) * depth / 2.0, depth)
        mask, outline, truth = _sphere_mask(K, center)
        corruption = CorruptionSpec(truncation_frac=0.25, truncation_angle=rng.uniform(0, 2 * math.pi))
        truncated = apply_corruption(mask, outline, corruption, rng)
        detection = detect_ellipse(extract_edge_points(truncated), camera_cfg, np.random.default_rng(case))
        if detection.verdict == VerdictEnum.VALID_CORRUPTED:
            hits += np.linalg.norm(compensate_center(detection.ellipse, K) - truth) < 2.0
    assert hits >= 0.95 * cases


@pytest.mark.parametrize("reach", [0.05, 0.1, 0.15])
@pytest.mark.parametrize("angle", [0.0, 1.6, 3.1, 4.7])
def test_small_rim_occluders_keep_the_mask_valid(K, camera_cfg, reach, angle):
    mask, outline, truth = _sphere_mask(K, (0.2, -0.1, 2.5))
    # blob radius as a share of the outline radius
    blob = OccluderBlob(angle=angle, angular_radius=2.0 * math.asin(reach / 2.0))
    occluded = apply_corruption(mask, outline, CorruptionSpec(occluder_blobs=[blob]), np.random.default_rng(0))
    detection = detect_ellipse(extract_edge_points(occluded), camera_cfg, np.random.default_rng(0))
    assert detection.is_valid
    assert np.linalg.norm(compensate_center(detection.ellipse, K) - truth) < 2.0


def test_detection_is_equivariant_under_quarter_turn(K, camera_cfg):
    mask, _, _ = _sphere_mask(K, (0.25, -0.15, 2.8))
    # np.rot90 sends pixel (u, v) to (v, W - 1 - u)
    turned_K = CameraIntrinsics(fx=K.fy, fy=K.fx, cx=K.cy, cy=K.image_width - 1 - K.cx,
                                image_width=K.image_height, image_height=K.image_width)
    u, v = extract_ellipse_center([mask], K, camera_cfg).center
    turned = extract_ellipse_center([np.rot90(mask)], turned_K, camera_cfg).center
    np.testing.assert_allclose(turned, (v, K.image_width - 1 - u), atol=0.5)


@pytest.mark.parametrize("seed", range(20))
def test_random_scatter_exhausts_the_edge_set(camera_cfg, seed):
    rng = np.random.default_rng(seed)
    edges = EdgePointSet(points=rng.uniform(0.0, 200.0, (20, 2)), source_mask_id="scatter")
    with pytest.raises(Exhausted):
        initial_ellipse_detection(edges, camera_cfg, rng)
    detection = detect_ellipse(edges, camera_cfg, np.random.default_rng(seed))
    assert detection.verdict == VerdictEnum.INVALID
    assert detection.failed_stage == "initial"


def test_rectification_needs_points_off_the_ellipse(camera_cfg):
    circle = Ellipse(center=(60.0, 60.0), semi_major=30.0, semi_minor=30.0)
    edges = EdgePointSet(points=_ellipse_points(circle, 120, 0.01, math.pi - 0.01), source_mask_id="arc")
    fit = EllipseFit(ellipse=circle, inlier_index=np.arange(len(edges)))
    with pytest.raises(NoExteriorCandidates):
        rectify_ellipse(edges, fit, [ConcentrationRegion(bins=[0, 1, 2, 3, 4, 5])], camera_cfg,
                        np.random.default_rng(0))
    detection = detect_ellipse(edges, camera_cfg, np.random.default_rng(0))
    assert detection.verdict == VerdictEnum.INVALID
    assert detection.failed_stage == "rectification"
    assert detection.reason.startswith("NoExteriorCandidates")
