import math

import numpy as np
import pytest

from app.helpers.lidar_pipeline import (
    adaptive_extent_threshold,
    cell_grid,
    center_from_points,
    center_from_representatives,
    cluster_along_rays,
    detect_sphere_roi,
    enumerate_sphere_hypotheses,
    extract_sphere_center,
    filter_noisy_clusters,
    fit_sphere_4pts,
    fit_spheres_batch,
    fuse_centers,
    remove_statistical_outliers,
    representative_point,
    segment_ground,
    voxel_representatives,
)
from app.helpers.scene_simulator import (
    LABEL_GROUND,
    LABEL_SPHERE,
    beam_directions,
    build_scene_specs,
    cast_beams,
    generate_scan,
)
from app.models.config import LidarConfig, ScanModeEnum, SimConfig
from app.models.geometry import SphereParams
from app.models.lidar import PointCloud
from app.models.scene import Box, ScanPattern
from app.utilities.exceptions import (
    AllClustersRemoved,
    Degenerate,
    NoCircleFound,
    NoHypotheses,
    TooFewPoints,
)


def _on_sphere(center, radius, count, rng):
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return np.asarray(center) + radius * directions


def _visible_cap(sphere: SphereParams, pattern: ScanPattern, frames: int = 1) -> np.ndarray:
    """Noise-free first hits of the beams on a sphere."""
    hits = []
    for frame in range(frames):
        d = beam_directions(pattern, frame)
        c = sphere.center_array
        b = d @ c
        disc = b * b - (c @ c - sphere.radius ** 2)
        ok = disc >= 0
        hits.append((b[ok] - np.sqrt(disc[ok]))[:, None] * d[ok])
    return np.vstack(hits)


def test_sphere_through_four_points(rng):
    points = _on_sphere((1.0, 2.0, 3.0), 0.5, 4, rng)
    hypothesis = fit_sphere_4pts(*points)
    np.testing.assert_allclose(hypothesis.params.center, (1.0, 2.0, 3.0), atol=1e-9)
    assert hypothesis.params.radius == pytest.approx(0.5, abs=1e-9)


def test_coplanar_points_are_degenerate():
    with pytest.raises(Degenerate):
        fit_sphere_4pts([0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1])


def test_batch_fit_recovers_random_spheres(rng):
    count = 1000
    centers = rng.uniform(-5, 5, size=(count, 3))
    radii = rng.uniform(0.05, 2.0, size=count)
    quads = np.stack([_on_sphere(c, r, 4, rng) for c, r in zip(centers, radii)])
    fitted, fitted_radii, valid = fit_spheres_batch(quads)
    well_posed = valid
    assert well_posed.mean() > 0.99
    np.testing.assert_allclose(fitted[well_posed], centers[well_posed], atol=1e-7)
    np.testing.assert_allclose(fitted_radii[well_posed], radii[well_posed], atol=1e-7)


def test_batch_fit_flags_every_coplanar_quadruple(rng):
    planar = rng.uniform(-1, 1, size=(500, 4, 3))
    planar[:, :, 2] = 0.7
    rotation = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    _, _, valid = fit_spheres_batch(planar @ rotation.T)
    assert not valid.any()


def test_outlier_removal_drops_isolated_points(rng):
    grid = np.stack(np.meshgrid(np.arange(10), np.arange(10), np.arange(3)), axis=-1).reshape(-1, 3) * 0.1
    cloud = PointCloud(points=np.vstack([grid, [[10.0, 10.0, 10.0]]]))
    filtered = remove_statistical_outliers(cloud, k=8, m=2.0)
    assert len(filtered) == len(grid)
    assert not np.any(np.all(filtered.points == 10.0, axis=1))


def test_outlier_removal_needs_more_than_k_points():
    with pytest.raises(TooFewPoints):
        remove_statistical_outliers(PointCloud(points=np.zeros((8, 3))), k=8, m=2.0)


def test_ground_plane_is_removed(rng, lidar_cfg):
    ground = np.column_stack([rng.uniform(2, 8, 2000), rng.uniform(-3, 3, 2000), np.full(2000, -1.0)])
    ball = _on_sphere((4.0, 0.0, -0.5), 0.1, 200, rng)
    split = segment_ground(PointCloud(points=np.vstack([ground, ball])), 0.02, lidar_cfg, rng)
    assert split.ground_found
    assert len(split.nonground) == 200
    np.testing.assert_allclose(split.plane[0], (0.0, 0.0, 1.0), atol=1e-9)
    assert split.plane[1] == pytest.approx(1.0)


def test_ground_passthrough_without_plane(rng, lidar_cfg):
    cloud = PointCloud(points=_on_sphere((4.0, 0.0, 0.0), 0.5, 300, rng))
    split = segment_ground(cloud, 0.02, lidar_cfg, rng)
    assert not split.ground_found
    assert len(split.nonground) == 300


def test_clusters_follow_beams():
    pattern = ScanPattern(el_min=-2.0, el_max=2.0, az_fov=5.0)
    sphere = SphereParams(center=(3.0, 0.1, 0.0), radius=0.1)
    points = _visible_cap(sphere, pattern, frames=4)
    clusters = cluster_along_rays(PointCloud(points=points), math.radians(0.2), math.radians(0.2))
    assert len(clusters) == len(points) // 4
    assert all(len(c) == 4 and c.radial_extent == pytest.approx(0.0, abs=1e-12) for c in clusters)
    keys = [(c.azimuth_bin, c.elevation_bin) for c in clusters]
    assert keys == sorted(keys)


def test_noisy_clusters_are_filtered(rng):
    members = []
    for i, extent in enumerate((0.01, 0.012, 0.5)):
        azimuth = math.radians(5.0 * i)
        direction = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
        members.append(np.outer(np.linspace(3.0, 3.0 + extent, 5), direction))
    clusters = cluster_along_rays(PointCloud(points=np.vstack(members)), math.radians(0.2), math.radians(0.2))
    assert len(clusters) == 3
    assert adaptive_extent_threshold(clusters) == pytest.approx(0.036)
    kept = filter_noisy_clusters(clusters)
    assert sorted(round(c.radial_extent, 3) for c in kept) == [0.01, 0.012]
    with pytest.raises(AllClustersRemoved):
        filter_noisy_clusters(clusters, extent_thresh=0.001)


def test_representative_is_member_mean(rng):
    direction = np.array([1.0, 0.0, 0.0])
    members = np.outer(3.0 + rng.normal(0, 0.01, 40), direction)
    cluster = cluster_along_rays(PointCloud(points=members), math.radians(0.2), math.radians(0.2))[0]
    grid = cell_grid(cluster, 16)
    assert grid.counts.sum() == 40
    np.testing.assert_allclose(representative_point(cluster, 16), members.mean(axis=0), atol=1e-12)


def test_voxel_representatives_are_centroids():
    points = np.array([[0.001, 0.001, 0.001], [0.003, 0.003, 0.003], [0.051, 0.0, 0.0]])
    reps = voxel_representatives(PointCloud(points=points), 0.01)
    np.testing.assert_allclose(reps, [[0.002, 0.002, 0.002], [0.051, 0.0, 0.0]])


def test_hypotheses_are_radius_gated(rng):
    reps = np.vstack([_on_sphere((2.0, 0.0, 0.0), 0.1, 8, rng), _on_sphere((2.0, 1.0, 0.0), 0.3, 4, rng)])
    hyps = enumerate_sphere_hypotheses(reps, 0.1, 0.01, cap=10_000)
    assert hyps.tried == math.comb(12, 4)
    assert len(hyps) >= math.comb(8, 4)
    assert np.all(np.abs(hyps.radii - 0.1) <= 0.01)
    assert [tuple(s) for s in hyps.sources] == sorted(tuple(s) for s in hyps.sources)


def test_capped_enumeration_is_deterministic(rng):
    reps = _on_sphere((2.0, 0.0, 0.0), 0.1, 30, rng)
    first = enumerate_sphere_hypotheses(reps, 0.1, 0.01, cap=500, rng=np.random.default_rng(9))
    second = enumerate_sphere_hypotheses(reps, 0.1, 0.01, cap=500, rng=np.random.default_rng(9))
    assert first.tried == 500
    np.testing.assert_array_equal(first.sources, second.sources)


def test_no_hypotheses_below_four_points():
    with pytest.raises(NoHypotheses):
        enumerate_sphere_hypotheses(np.zeros((3, 3)), 0.1, 0.01, cap=10)


def test_fusion_ignores_far_hypotheses(rng):
    reps = _on_sphere((2.0, 0.5, -0.3), 0.1, 10, rng)
    hyps = enumerate_sphere_hypotheses(reps, 0.1, 0.01, cap=10_000)
    np.testing.assert_allclose(fuse_centers(hyps, 0.005, 0.02), (2.0, 0.5, -0.3), atol=1e-9)


def test_center_from_noise_free_spinning_cap(lidar_cfg):
    sphere = SphereParams(center=(3.0, 0.4, -0.2), radius=0.1)
    points = _visible_cap(sphere, ScanPattern(el_min=-6.0, el_max=2.0, az_fov=15.0), frames=3)
    extraction = center_from_points(points, ScanModeEnum.SPINNING, lidar_cfg)
    np.testing.assert_allclose(extraction.center, sphere.center, atol=1e-6)
    assert extraction.hypotheses > 0
    assert all(stat.kept for stat in extraction.clusters)


def test_center_from_noise_free_rosette(lidar_cfg):
    sphere = SphereParams(center=(3.0, 0.4, -0.2), radius=0.1)
    pattern = ScanPattern(mode=ScanModeEnum.NON_REPETITIVE, el_min=-6.0, el_max=2.0, rosette_fov=20.0)
    points = _visible_cap(sphere, pattern, frames=20)
    cfg = lidar_cfg.model_copy(update={"voxel_size": 0.005})
    extraction = center_from_points(points, ScanModeEnum.NON_REPETITIVE, cfg)
    np.testing.assert_allclose(extraction.center, sphere.center, atol=2e-3)


def test_center_is_equivariant_under_rigid_motion(lidar_cfg, rng):
    reps = _on_sphere((2.5, -0.3, 0.1), 0.1, 12, rng)
    rotation = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    if np.linalg.det(rotation) < 0:
        rotation[:, 0] *= -1
    shift = np.array([0.4, -1.2, 0.3])
    center, _ = center_from_representatives(reps, lidar_cfg)
    moved, _ = center_from_representatives(reps @ rotation.T + shift, lidar_cfg)
    np.testing.assert_allclose(moved, rotation @ center + shift, atol=1e-6)


def test_extract_sphere_center_on_simulated_scene(clean_sim, lidar_cfg):
    spec = build_scene_specs(clean_sim.model_copy(update={"scenes": 1}))[0]
    extraction = extract_sphere_center(generate_scan(spec), spec.pattern.mode, spec.sphere.radius, lidar_cfg)
    np.testing.assert_allclose(extraction.center, spec.sphere.center, atol=1e-3)
    assert extraction.ground_found


def test_extraction_is_deterministic(clean_sim, lidar_cfg):
    spec = build_scene_specs(clean_sim.model_copy(update={"scenes": 1, "sigma0": 0.003}))[0]
    cloud = generate_scan(spec)
    first = extract_sphere_center(cloud, spec.pattern.mode, spec.sphere.radius, lidar_cfg)
    second = extract_sphere_center(cloud, spec.pattern.mode, spec.sphere.radius, lidar_cfg)
    assert first == second


def _nonground(cloud: PointCloud) -> PointCloud:
    return cloud.subset(cloud.label != LABEL_GROUND)


def _sphere_scene(seed: int, **updates):
    cfg = SimConfig(scenes=1, frames=5, clutter_boxes=0, rng_seed=seed)
    return build_scene_specs(cfg)[0].model_copy(update=updates)


@pytest.mark.parametrize("seed", range(6))
def test_roi_keeps_the_sphere_next_to_a_box(lidar_cfg, seed):
    spec = _sphere_scene(seed)
    x, y, _ = spec.sphere.center
    box = Box(center=(x + 1.5, y + 0.25, -spec.lidar_height + 0.5), size=(0.6, 0.6, 1.0), yaw=0.3)
    cloud = _nonground(generate_scan(spec.model_copy(update={"clutter": [box]})))
    roi, circle = detect_sphere_roi(cloud, lidar_cfg, spec.sphere.radius)
    on_sphere = roi.label == LABEL_SPHERE
    assert np.mean(on_sphere) >= 0.95
    assert np.count_nonzero(on_sphere) >= 0.95 * np.count_nonzero(cloud.label == LABEL_SPHERE)
    assert circle.score >= lidar_cfg.hough_min_score


@pytest.mark.parametrize("seed", range(6))
def test_roi_of_clutter_only_scene_finds_no_circle(lidar_cfg, seed):
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(3):
        distance, azimuth = rng.uniform(3.0, 6.0), math.radians(rng.uniform(-12.0, 12.0))
        size = rng.uniform([0.4, 0.4, 0.5], [1.0, 1.0, 1.5])
        boxes.append(Box(center=(distance * math.cos(azimuth), distance * math.sin(azimuth), -1.0 + size[2] / 2.0),
                         size=tuple(size), yaw=float(rng.uniform(0, math.pi))))
    # sphere behind the sensor, no beam reaches it
    spec = _sphere_scene(seed, sphere=SphereParams(center=(-5.0, 0.0, 0.0), radius=0.1), clutter=boxes)
    directions = beam_directions(spec.pattern)
    t, label, _ = cast_beams(directions, spec)
    keep = np.isfinite(t) & (label != LABEL_GROUND)
    ranges = t[keep] + rng.normal(0.0, 0.003, np.count_nonzero(keep))
    cloud = PointCloud(points=ranges[:, None] * directions[keep], label=label[keep])
    with pytest.raises(NoCircleFound):
        detect_sphere_roi(cloud, lidar_cfg, 0.1)


@pytest.mark.parametrize("seed", range(6))
def test_roi_of_lone_sphere_holds_all_its_points(lidar_cfg, seed):
    spec = _sphere_scene(seed)
    cloud = _nonground(generate_scan(spec))
    roi, _ = detect_sphere_roi(cloud, lidar_cfg, spec.sphere.radius)
    assert np.count_nonzero(roi.label == LABEL_SPHERE) >= 0.99 * np.count_nonzero(cloud.label == LABEL_SPHERE)


def test_roi_of_empty_cloud(lidar_cfg):
    with pytest.raises(TooFewPoints):
        detect_sphere_roi(PointCloud(points=np.empty((0, 3))), lidar_cfg)
