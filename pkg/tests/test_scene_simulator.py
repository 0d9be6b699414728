import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.helpers.geometry import sphere_outline_ellipse
from app.helpers.scene_simulator import (
    LABEL_GROUND,
    LABEL_SPHERE,
    LABEL_SPURIOUS,
    PRESETS,
    apply_corruption,
    beam_directions,
    build_scene_specs,
    corruption_preset,
    generate_dataset,
    generate_scan,
    rasterize_outline,
    render_mask,
)
from app.models.config import ScanModeEnum, SimConfig
from app.models.geometry import SphereParams
from app.models.scene import CorruptionSpec, OccluderBlob, ScanPattern, SceneSpec
from app.utilities.exceptions import ConfigError, SphereNotVisible
from app.utilities.files import read_json


@pytest.fixture
def outline(K):
    return sphere_outline_ellipse(SphereParams(center=(0.0, 0.0, 3.0), radius=0.2), K)


@pytest.fixture
def disk(outline, K):
    return rasterize_outline(outline, K)


def _corrupt(disk, outline, **fields):
    return apply_corruption(disk, outline, CorruptionSpec(**fields), np.random.default_rng(0))


def test_spinning_beams_cover_the_grid():
    directions = beam_directions(ScanPattern())
    assert directions.shape == (71 * 301, 3)
    np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
    elevations = np.degrees(np.arcsin(directions[:, 2]))
    assert elevations.min() == pytest.approx(-10.0)
    assert elevations.max() == pytest.approx(4.0)


def test_only_the_rosette_moves_between_frames():
    spinning = ScanPattern()
    np.testing.assert_array_equal(beam_directions(spinning, 0), beam_directions(spinning, 3))
    rosette = ScanPattern(mode=ScanModeEnum.NON_REPETITIVE, rosette_points=500)
    assert not np.allclose(beam_directions(rosette, 0), beam_directions(rosette, 1))


def test_solid_state_grid_stays_in_the_field():
    directions = beam_directions(ScanPattern(mode=ScanModeEnum.SOLID_STATE))
    azimuth = np.degrees(np.arctan2(directions[:, 1], directions[:, 0]))
    assert np.all(np.abs(azimuth) <= 30.0 + 1e-9)
    assert np.all(directions[:, 0] > 0)


def test_noise_free_scan_lies_on_the_surfaces(clean_sim):
    spec = build_scene_specs(clean_sim.model_copy(update={"scenes": 1}))[0]
    cloud = generate_scan(spec)
    on_sphere = cloud.points[cloud.label == LABEL_SPHERE]
    assert len(on_sphere) > 0
    np.testing.assert_allclose(np.linalg.norm(on_sphere - spec.sphere.center_array, axis=1),
                               spec.sphere.radius, atol=1e-9)
    np.testing.assert_allclose(cloud.points[cloud.label == LABEL_GROUND][:, 2], -spec.lidar_height, atol=1e-9)
    assert set(np.unique(cloud.frame)) == set(range(clean_sim.frames))
    assert np.linalg.norm(cloud.points, axis=1).max() <= spec.max_range + 1e-9


def test_spurious_returns_are_labelled(clean_sim):
    spec = build_scene_specs(clean_sim.model_copy(update={"scenes": 1, "clutter_rate": 0.01}))[0]
    cloud = generate_scan(spec)
    assert np.count_nonzero(cloud.label == LABEL_SPURIOUS) > 0


def test_scan_without_sphere_hits(K, T_gt):
    spec = SceneSpec(scene_id="behind", sphere=SphereParams(center=(-3.0, 0.0, 0.0), radius=0.1), T_gt=T_gt, K=K,
                     frames=1)
    with pytest.raises(SphereNotVisible):
        generate_scan(spec)


def test_rasterized_area_matches_the_outline(disk, outline):
    assert np.count_nonzero(disk) == pytest.approx(outline.area, rel=0.02)


def test_truncation_removes_the_requested_share(disk, outline):
    truncated = _corrupt(disk, outline, truncation_frac=0.25, truncation_angle=0.4)
    assert np.count_nonzero(truncated) / np.count_nonzero(disk) == pytest.approx(0.75, abs=0.02)


def test_occluder_removes_the_rim_at_its_angle(disk, outline):
    occluded = _corrupt(disk, outline, occluder_blobs=[OccluderBlob(angle=0.0, angular_radius=math.radians(30))])
    axis = np.array([math.cos(outline.angle), math.sin(outline.angle)])
    center = outline.center_array

    def pixel(point):
        return occluded[round(point[1]), round(point[0])]

    assert not pixel(center + (outline.semi_major - 2) * axis)
    assert pixel(center - (outline.semi_major - 2) * axis)
    assert pixel(center)


def test_erosion_and_scratches_shrink_the_mask(disk, outline):
    area = np.count_nonzero(disk)
    assert np.count_nonzero(_corrupt(disk, outline, blur_erosion_px=2)) < area
    assert np.count_nonzero(_corrupt(disk, outline, scratch_lines=3)) < area


def test_mud_hides_the_requested_share(disk, outline):
    muddy = _corrupt(disk, outline, mud_mask_frac=0.15, mud_angle=1.0)
    hidden = 1.0 - np.count_nonzero(muddy) / np.count_nonzero(disk)
    assert 0.14 <= hidden <= 0.2


@pytest.mark.parametrize("name", PRESETS)
def test_presets_are_valid(name):
    assert isinstance(corruption_preset(name, np.random.default_rng(0)), CorruptionSpec)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        corruption_preset("fog", np.random.default_rng(0))
    with pytest.raises(ConfigError):
        build_scene_specs(SimConfig(scenes=1, corruption_preset="fog"))


def test_sim_config_rejects_inverted_bands():
    with pytest.raises(ValidationError):
        SimConfig(depth_min=5.0, depth_max=2.0)


def test_specs_share_the_rig_and_place_decoys(clean_sim):
    specs = build_scene_specs(clean_sim.model_copy(update={"scenes": 4, "decoy_scenes": 2}))
    assert [s.scene_id for s in specs] == ["scene_000", "scene_001", "scene_002", "scene_003"]
    assert len({s.T_gt for s in specs}) == 1
    assert sum(s.decoy_shape is not None for s in specs) == 2
    assert specs == build_scene_specs(clean_sim.model_copy(update={"scenes": 4, "decoy_scenes": 2}))


def test_mask_projects_the_sphere(clean_sim):
    spec = build_scene_specs(clean_sim.model_copy(update={"scenes": 1}))[0]
    rendered = render_mask(spec)
    u, v = rendered.true_center
    assert rendered.mask[round(v), round(u)]
    assert np.count_nonzero(rendered.mask) == pytest.approx(rendered.outline.area, rel=0.05)


def test_empty_dataset_writes_only_the_manifest(tmp_path):
    manifest = generate_dataset([], tmp_path / "empty")
    assert manifest.scenes == [] and manifest.rig is None
    assert [p.name for p in (tmp_path / "empty").iterdir()] == ["manifest.json"]


def test_dataset_is_reproducible(clean_sim, tmp_path):
    specs = build_scene_specs(clean_sim.model_copy(update={"scenes": 2, "frames": 2}))
    first = generate_dataset(specs, tmp_path / "a")
    generate_dataset(specs, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for entry in first.scenes:
        for name in (entry.cloud, entry.mask, entry.truth):
            assert (tmp_path / "a" / name).is_file()
    rig = read_json(tmp_path / "a" / "rig.json")
    np.testing.assert_allclose(rig["T_gt"], specs[0].T_gt.matrix)
