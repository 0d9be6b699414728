import math
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.optimize import brentq
from scipy.spatial.transform import Rotation
from skimage.draw import line as draw_line
from skimage.draw import polygon as draw_polygon

from app.helpers.geometry import project_point, sphere_outline_ellipse, to_ellipse_frame
from app.models.config import ScanModeEnum, SimConfig
from app.models.geometry import CameraIntrinsics, Ellipse, RigidTransform, SphereParams
from app.models.lidar import PointCloud
from app.models.scene import (
    Box,
    CorruptionSpec,
    Manifest,
    ManifestEntry,
    NoiseModel,
    OccluderBlob,
    RenderedMask,
    ScanPattern,
    SceneSpec,
)
from app.utilities.exceptions import ConfigError, GeometryError, SphereNotVisible
from app.utilities.files import ensure_dir, write_json, write_mask, write_ply
from app.utilities.logger import logger

LABEL_GROUND = 0
LABEL_SPHERE = 1
LABEL_CLUTTER = 2
LABEL_SPURIOUS = 3

# camera x right, y down, z forward from LiDAR x forward, y left, z up
CAMERA_FROM_LIDAR = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

ROSETTE_STEP = 0.05
ROSETTE_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
SPURIOUS_MIN_RANGE = 0.5
PLACEMENT_ATTEMPTS = 200
IMAGE_MARGIN_PX = 5.0
JITTER_HARMONICS = range(2, 9)

PRESETS = (
    "intact",
    "contamination_easy",
    "contamination_medium",
    "contamination_extreme",
    "truncated",
    "scratched",
    "blur",
    "mud",
)


def _unit(azimuth: NDArray, elevation: NDArray) -> NDArray[np.float64]:
    return np.column_stack([
        np.cos(elevation) * np.cos(azimuth),
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
    ])


def beam_directions(pattern: ScanPattern, frame: int = 0) -> NDArray[np.float64]:
    """
    Unit beam directions of one frame in the LiDAR frame.

    Spinning beams lie on integer multiples of the ring and azimuth steps so
    they fall on bin centers of a matching angular grid.

    Args:
        pattern (ScanPattern): Beam layout.
        frame (int): Frame index, only the non-repetitive pattern depends on it.

    Returns:
        NDArray: (B, 3) unit vectors.
    """
    if pattern.mode == ScanModeEnum.SPINNING:
        el_idx = np.arange(math.ceil(pattern.el_min / pattern.ring_step - 1e-9),
                           math.floor(pattern.el_max / pattern.ring_step + 1e-9) + 1)
        half = math.floor(pattern.az_fov / pattern.az_step + 1e-9)
        az_idx = np.arange(-half, half + 1)
        el, az = np.meshgrid(np.radians(el_idx * pattern.ring_step), np.radians(az_idx * pattern.az_step),
                             indexing="ij")
        return _unit(az.ravel(), el.ravel())

    if pattern.mode == ScanModeEnum.SOLID_STATE:
        pitch = math.tan(math.radians(pattern.grid_step))
        half = math.floor(math.tan(math.radians(pattern.az_fov)) / pitch)
        lateral = np.arange(-half, half + 1) * pitch
        vertical = np.arange(math.ceil(math.tan(math.radians(pattern.el_min)) / pitch),
                             math.floor(math.tan(math.radians(pattern.el_max)) / pitch) + 1) * pitch
        w, u = np.meshgrid(vertical, lateral, indexing="ij")
        rays = np.column_stack([np.ones(w.size), u.ravel(), w.ravel()])
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    # non-repetitive: rosette traced continuously across frames
    t = (frame * pattern.rosette_points + np.arange(pattern.rosette_points)) * ROSETTE_STEP
    half = pattern.rosette_fov / 2.0
    az = half * (np.cos(t) + np.cos(ROSETTE_RATIO * t))
    el = (pattern.el_min + pattern.el_max) / 2.0 + half * (np.sin(t) - np.sin(ROSETTE_RATIO * t))
    return _unit(np.radians(az), np.radians(el))


def _hit_sphere(directions: NDArray, sphere: SphereParams):
    c = sphere.center_array
    b = directions @ c
    disc = b * b - (c @ c - sphere.radius ** 2)
    root = np.sqrt(np.maximum(disc, 0.0))
    t = np.where((disc >= 0) & (b - root > 0), b - root, np.inf)
    with np.errstate(invalid="ignore"):
        normals = (t[:, None] * directions - c) / sphere.radius
        cosine = -np.sum(normals * directions, axis=1)
    return t, np.nan_to_num(cosine, nan=1.0)


def _hit_ground(directions: NDArray, height: float, tilt_deg: float):
    tilt = math.radians(tilt_deg)
    normal = np.array([math.sin(tilt), 0.0, math.cos(tilt)])
    facing = directions @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -height * normal[2] / facing
    t = np.where((facing < 0) & (t > 0), t, np.inf)
    return t, -facing


def _hit_box(directions: NDArray, box: Box):
    yaw = Rotation.from_euler("z", box.yaw)
    origin = yaw.inv().apply(-np.asarray(box.center))
    local = yaw.inv().apply(directions)
    half = np.asarray(box.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - origin) / local
        t2 = (half - origin) / local
    near = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
    far = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    hit = (t_far >= t_near) & (t_near > 0)
    axis = near.argmax(axis=1)
    cosine = np.abs(local[np.arange(len(local)), axis])
    return np.where(hit, t_near, np.inf), cosine


def cast_beams(directions: NDArray[np.float64], spec: SceneSpec):
    """
    Nearest surface along each beam.

    Returns:
        tuple[NDArray, NDArray, NDArray]: Range (inf when nothing is hit
        within `max_range`), label and incidence angle per beam.
    """
    candidates = [_hit_ground(directions, spec.lidar_height, spec.ground_tilt_deg) + (LABEL_GROUND,),
                  _hit_sphere(directions, spec.sphere) + (LABEL_SPHERE,)]
    candidates += [_hit_box(directions, box) + (LABEL_CLUTTER,) for box in spec.clutter]
    ranges = np.column_stack([c[0] for c in candidates])
    cosines = np.column_stack([c[1] for c in candidates])
    labels = np.array([c[2] for c in candidates])
    nearest = np.argmin(ranges, axis=1)
    rows = np.arange(len(directions))
    t = ranges[rows, nearest]
    t = np.where(t <= spec.max_range, t, np.inf)
    incidence = np.arccos(np.clip(cosines[rows, nearest], 0.0, 1.0))
    return t, labels[nearest], incidence


def generate_scan(spec: SceneSpec) -> PointCloud:
    """
    Simulates the accumulated LiDAR cloud of a scene.

    Every return gets Gaussian range noise along its beam with the
    incidence-dependent sigma of the noise model; spurious returns at random
    ranges are added at `clutter_rate`.

    Args:
        spec (SceneSpec): The scene.

    Returns:
        PointCloud: Points with labels (0 ground, 1 sphere, 2 clutter,
        3 spurious) and frame indices.

    Raises:
        SphereNotVisible: If no beam hits the sphere.
    """
    rng = np.random.default_rng(spec.seed)
    fixed = spec.pattern.mode != ScanModeEnum.NON_REPETITIVE
    cached = None
    points, labels, frames = [], [], []
    for frame in range(spec.frames):
        if cached is None or not fixed:
            directions = beam_directions(spec.pattern, frame)
            t, label, incidence = cast_beams(directions, spec)
            returned = np.isfinite(t)
            cached = (directions, t, label, incidence, returned)
        directions, t, label, incidence, returned = cached
        sigma = spec.noise.sigma(incidence[returned])
        ranges = t[returned] + rng.standard_normal(len(sigma)) * sigma
        points.append(ranges[:, None] * directions[returned])
        labels.append(label[returned])
        frames.append(np.full(len(ranges), frame))

        spurious = rng.binomial(int(returned.sum()), spec.noise.clutter_rate) if spec.noise.clutter_rate else 0
        if spurious:
            beams = directions[rng.integers(0, len(directions), size=spurious)]
            distance = rng.uniform(SPURIOUS_MIN_RANGE, spec.max_range, size=spurious)
            points.append(distance[:, None] * beams)
            labels.append(np.full(spurious, LABEL_SPURIOUS))
            frames.append(np.full(spurious, frame))

    label = np.concatenate(labels)
    if not np.any(label == LABEL_SPHERE):
        raise SphereNotVisible(f"no beam of {spec.scene_id} hits the sphere")
    return PointCloud(points=np.vstack(points), label=label, frame=np.concatenate(frames))


def _segment_fraction(h: float) -> float:
    """Share of the unit disk beyond the chord at signed distance h from the center."""
    return (math.acos(h) - h * math.sqrt(1.0 - h * h)) / math.pi


def _jitter_profile(phi: NDArray, rms_px: float, rng: np.random.Generator) -> NDArray:
    coeffs = rng.standard_normal((len(JITTER_HARMONICS), 2)) / np.array(list(JITTER_HARMONICS))[:, None]
    scale = rms_px / math.sqrt(np.sum(coeffs ** 2) / 2.0)
    profile = np.zeros_like(phi)
    for (a, b), k in zip(coeffs, JITTER_HARMONICS):
        profile += a * np.cos(k * phi) + b * np.sin(k * phi)
    return scale * profile


def _pixel_grid(K: CameraIntrinsics) -> NDArray[np.float64]:
    rows, cols = np.indices((K.image_height, K.image_width))
    return np.column_stack([cols.ravel(), rows.ravel()]).astype(np.float64)


def rasterize_outline(outline: Ellipse, K: CameraIntrinsics, jitter_px: float = 0.0,
                      rng: Optional[np.random.Generator] = None) -> NDArray[np.bool_]:
    """
    Fills the ellipse interior at pixel centers.

    With jitter the boundary moves radially by a smooth random profile of
    the given RMS in pixels.
    """
    local = to_ellipse_frame(outline, _pixel_grid(K))
    a, b = outline.semi_major, outline.semi_minor
    xn, yn = local[:, 0] / a, local[:, 1] / b
    rho = np.hypot(xn, yn)
    limit = np.ones_like(rho)
    if jitter_px > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        phi = np.arctan2(yn, xn)
        boundary = np.hypot(a * np.cos(phi), b * np.sin(phi))
        limit = 1.0 + _jitter_profile(phi, jitter_px, rng) / boundary
    return (rho <= limit).reshape(K.image_height, K.image_width)


def _rim_point(outline: Ellipse, angle: float) -> NDArray[np.float64]:
    return np.array([outline.semi_major * math.cos(angle), outline.semi_minor * math.sin(angle)])


def _to_pixels(outline: Ellipse, local: NDArray[np.float64]) -> NDArray[np.float64]:
    c, s = math.cos(outline.angle), math.sin(outline.angle)
    rotation = np.array([[c, -s], [s, c]])
    return np.atleast_2d(local) @ rotation.T + outline.center_array


def apply_corruption(mask: NDArray[np.bool_], outline: Ellipse, corruption: CorruptionSpec,
                     rng: np.random.Generator) -> NDArray[np.bool_]:
    """
    Damages a rendered mask: truncation, rim occluders, scratches, erosion
    and a mud patch, in that order.
    """
    mask = mask.copy()
    height, width = mask.shape
    rows, cols = np.indices(mask.shape)
    grid = np.column_stack([cols.ravel(), rows.ravel()]).astype(np.float64)
    local = to_ellipse_frame(outline, grid)
    a, b = outline.semi_major, outline.semi_minor

    if corruption.truncation_frac > 0:
        # chord in the unit-disk frame keeps area fractions of the ellipse
        h = brentq(lambda x: _segment_fraction(x) - corruption.truncation_frac, -1.0, 1.0)
        psi = corruption.truncation_angle
        side = (local[:, 0] / a) * math.cos(psi) + (local[:, 1] / b) * math.sin(psi)
        mask &= ~(side > h).reshape(mask.shape)

    for blob in corruption.occluder_blobs:
        center = _rim_point(outline, blob.angle)
        reach = 2.0 * float(np.linalg.norm(center)) * math.sin(blob.angular_radius / 2.0)
        mask &= ~(np.linalg.norm(local - center, axis=1) <= reach).reshape(mask.shape)

    for _ in range(corruption.scratch_lines):
        ends = _to_pixels(outline, np.array([_rim_point(outline, t) for t in rng.uniform(0, 2 * math.pi, 2)]))
        ends = np.clip(np.round(ends).astype(int), 0, [width - 1, height - 1])
        rr, cc = draw_line(ends[0, 1], ends[0, 0], ends[1, 1], ends[1, 0])
        scratch = np.zeros_like(mask)
        scratch[rr, cc] = True
        scratch = ndimage.binary_dilation(scratch, structure=np.ones((2, 2), dtype=bool))
        mask &= ~scratch

    if corruption.blur_erosion_px > 0:
        mask = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                      iterations=corruption.blur_erosion_px)

    if corruption.mud_mask_frac > 0 and mask.any():
        center = _to_pixels(outline, 0.6 * _rim_point(outline, corruption.mud_angle))[0]
        distance = np.hypot(cols - center[0], rows - center[1])
        target = corruption.mud_mask_frac * np.count_nonzero(mask)
        low, high = 0.0, 2.0 * a
        for _ in range(40):
            mid = (low + high) / 2.0
            if np.count_nonzero(mask & (distance <= mid)) >= target:
                high = mid
            else:
                low = mid
        mask &= ~(distance <= high)
    return mask


def render_decoy(outline: Ellipse, shape: str, K: CameraIntrinsics, rng: np.random.Generator) -> NDArray[np.bool_]:
    """Rasterises a rectangle (aspect 1 to 3) or a triangle of the outline's size."""
    size = outline.semi_major
    turn = rng.uniform(0, math.pi)
    if shape == "rectangle":
        half_height = 0.9 * size
        half_width = half_height * rng.uniform(1.0, 3.0)
        corners = np.array([[-half_width, -half_height], [half_width, -half_height],
                            [half_width, half_height], [-half_width, half_height]])
    else:
        angles = turn + 2 * math.pi * np.arange(3) / 3 + rng.uniform(-0.25, 0.25, 3)
        corners = 1.2 * size * np.column_stack([np.cos(angles), np.sin(angles)])
    c, s = math.cos(turn), math.sin(turn)
    vertices = corners @ np.array([[c, -s], [s, c]]).T + outline.center_array
    mask = np.zeros((K.image_height, K.image_width), dtype=bool)
    rr, cc = draw_polygon(vertices[:, 1], vertices[:, 0], shape=mask.shape)
    mask[rr, cc] = True
    return mask


def render_mask(spec: SceneSpec) -> RenderedMask:
    """
    Renders the camera mask of a scene with its corruption.

    Args:
        spec (SceneSpec): The scene.

    Returns:
        RenderedMask: Mask, analytic outline and the projected sphere center.

    Raises:
        SphereBehindCamera: If the sphere is not in front of the camera.
    """
    rng = np.random.default_rng([spec.seed, 1])
    center_cam = spec.T_gt.apply(spec.sphere.center_array)
    outline = sphere_outline_ellipse(SphereParams(center=center_cam, radius=spec.sphere.radius), spec.K)
    true_center = project_point(center_cam, spec.K)
    if spec.decoy_shape:
        mask = render_decoy(outline, spec.decoy_shape, spec.K, rng)
    else:
        mask = rasterize_outline(outline, spec.K, spec.noise.mask_jitter_px, rng)
        mask = apply_corruption(mask, outline, spec.corruption, rng)
    return RenderedMask(mask=mask, outline=outline, true_center=(float(true_center[0]), float(true_center[1])))


def corruption_preset(name: str, rng: np.random.Generator) -> CorruptionSpec:
    """
    Named mask damage levels, with random placement drawn from `rng`.

    Raises:
        ConfigError: If the name is unknown.
    """
    start = float(rng.uniform(0, 2 * math.pi))

    def blobs(count: int, degrees: float) -> list[OccluderBlob]:
        return [OccluderBlob(angle=(start + 2 * math.pi * k / count) % (2 * math.pi),
                             angular_radius=math.radians(degrees)) for k in range(count)]

    if name == "intact":
        return CorruptionSpec()
    if name == "contamination_easy":
        return CorruptionSpec(occluder_blobs=blobs(1, 8.0))
    if name == "contamination_medium":
        return CorruptionSpec(occluder_blobs=blobs(2, 12.0))
    if name == "contamination_extreme":
        return CorruptionSpec(occluder_blobs=blobs(3, 18.0), scratch_lines=2)
    if name == "truncated":
        return CorruptionSpec(truncation_frac=0.25, truncation_angle=start)
    if name == "scratched":
        return CorruptionSpec(scratch_lines=4)
    if name == "blur":
        return CorruptionSpec(blur_erosion_px=2)
    if name == "mud":
        return CorruptionSpec(mud_mask_frac=0.15, mud_angle=start)
    raise ConfigError(f"unknown corruption preset {name!r}, expected one of {', '.join(PRESETS)}")


def _custom_corruption(cfg: SimConfig, rng: np.random.Generator) -> CorruptionSpec:
    start = float(rng.uniform(0, 2 * math.pi))
    blobs = [OccluderBlob(angle=(start + 2 * math.pi * k / cfg.occluder_count) % (2 * math.pi),
                          angular_radius=math.radians(cfg.occluder_radius_deg))
             for k in range(cfg.occluder_count)]
    return CorruptionSpec(truncation_frac=cfg.truncation_frac, truncation_angle=start, occluder_blobs=blobs,
                          scratch_lines=cfg.scratch_lines, blur_erosion_px=cfg.blur_erosion_px,
                          mud_mask_frac=cfg.mud_mask_frac, mud_angle=start)


def rig_transform(cfg: SimConfig, rng: np.random.Generator) -> RigidTransform:
    """Nominal axis permutation perturbed by the configured extrinsic jitter."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    perturbation = Rotation.from_rotvec(axis * math.radians(cfg.extrinsic_jitter_deg) * rng.uniform(0.5, 1.0))
    translation = np.asarray(cfg.baseline) + rng.uniform(-cfg.extrinsic_jitter_m, cfg.extrinsic_jitter_m, 3)
    return RigidTransform(rotation=perturbation.as_matrix() @ CAMERA_FROM_LIDAR, translation=translation)


def _place_sphere(cfg: SimConfig, T_gt: RigidTransform, K: CameraIntrinsics,
                  rng: np.random.Generator) -> SphereParams:
    for _ in range(PLACEMENT_ATTEMPTS):
        az = math.radians(rng.uniform(-cfg.sphere_az_max_deg, cfg.sphere_az_max_deg))
        el = math.radians(rng.uniform(cfg.sphere_el_min_deg, cfg.sphere_el_max_deg))
        distance = rng.uniform(cfg.depth_min, cfg.depth_max)
        center = distance * _unit(np.array([az]), np.array([el]))[0]
        if center[2] - cfg.sphere_radius <= -cfg.lidar_height + 0.05:
            continue
        try:
            outline = sphere_outline_ellipse(SphereParams(center=T_gt.apply(center), radius=cfg.sphere_radius), K)
        except GeometryError:
            continue
        u, v = outline.center
        reach = outline.semi_major + IMAGE_MARGIN_PX
        if reach <= u <= K.image_width - reach and reach <= v <= K.image_height - reach:
            return SphereParams(center=center, radius=cfg.sphere_radius)
    raise SphereNotVisible(f"no sphere placement visible to both sensors in {PLACEMENT_ATTEMPTS} attempts")


def _place_box(cfg: SimConfig, sphere: SphereParams, rng: np.random.Generator) -> Optional[Box]:
    near = float(np.linalg.norm(sphere.center_array)) + 1.0
    far = cfg.max_range - 0.3
    if near >= far:
        return None
    az = math.radians(rng.uniform(-0.8 * cfg.az_fov_deg, 0.8 * cfg.az_fov_deg))
    distance = rng.uniform(near, far)
    size = rng.uniform([0.4, 0.4, 0.5], [1.0, 1.0, 1.5])
    center = (distance * math.cos(az), distance * math.sin(az), -cfg.lidar_height + size[2] / 2.0)
    return Box(center=center, size=tuple(size), yaw=float(rng.uniform(0, math.pi)))


def build_scene_specs(cfg: SimConfig) -> list[SceneSpec]:
    """
    Draws the scenes of a dataset from the simulation settings.

    All scenes share one rig (intrinsics and T_gt); each scene gets its own
    seed, sphere placement, clutter and corruption.

    Raises:
        SphereNotVisible: If a sphere cannot be placed.
        ConfigError: If the corruption preset is unknown.
    """
    if cfg.corruption_preset and cfg.corruption_preset not in PRESETS:
        raise ConfigError(f"unknown corruption preset {cfg.corruption_preset!r}")
    rng = np.random.default_rng(cfg.rng_seed)
    K = CameraIntrinsics(fx=cfg.fx, fy=cfg.fy, cx=cfg.cx, cy=cfg.cy,
                         image_width=cfg.image_width, image_height=cfg.image_height)
    T_gt = rig_transform(cfg, rng)
    pattern = ScanPattern(mode=cfg.scan_mode, el_min=cfg.el_min_deg, el_max=cfg.el_max_deg,
                          ring_step=cfg.ring_step_deg, az_fov=cfg.az_fov_deg, az_step=cfg.az_step_deg,
                          grid_step=cfg.grid_step_deg, rosette_points=cfg.rosette_points,
                          rosette_fov=cfg.rosette_fov_deg)
    noise = NoiseModel(sigma0=cfg.sigma0, incidence_gain=cfg.incidence_gain, sigma_max=cfg.sigma_max,
                       clutter_rate=cfg.clutter_rate, mask_jitter_px=cfg.mask_jitter_px)
    decoys = set(int(i) for i in rng.choice(cfg.scenes, size=cfg.decoy_scenes, replace=False)) \
        if cfg.decoy_scenes else set()

    specs = []
    for i in range(cfg.scenes):
        seed = int(rng.integers(0, 2 ** 31 - 1))
        scene_rng = np.random.default_rng(seed)
        sphere = _place_sphere(cfg, T_gt, K, scene_rng)
        boxes = [box for box in (_place_box(cfg, sphere, scene_rng) for _ in range(cfg.clutter_boxes)) if box]
        if cfg.corruption_preset:
            corruption = corruption_preset(cfg.corruption_preset, scene_rng)
        else:
            corruption = _custom_corruption(cfg, scene_rng)
        specs.append(SceneSpec(
            scene_id=f"scene_{i:03d}",
            sphere=sphere,
            T_gt=T_gt,
            K=K,
            pattern=pattern,
            frames=cfg.frames,
            noise=noise,
            corruption=corruption,
            seed=seed,
            lidar_height=cfg.lidar_height,
            ground_tilt_deg=cfg.ground_tilt_deg,
            clutter=boxes,
            max_range=cfg.max_range,
            decoy_shape=cfg.decoy_shape if i in decoys else None,
        ))
    return specs


def scene_truth(spec: SceneSpec, rendered: RenderedMask) -> dict:
    center_cam = spec.T_gt.apply(spec.sphere.center_array)
    return {
        "scene_id": spec.scene_id,
        "seed": spec.seed,
        "scan_mode": spec.pattern.mode.value,
        "radius": spec.sphere.radius,
        "sphere_lidar": list(spec.sphere.center),
        "sphere_camera": [float(x) for x in center_cam],
        "pixel_center": list(rendered.true_center),
        "outline": rendered.outline.model_dump(mode="json"),
        "T_gt": spec.T_gt.matrix.tolist(),
        "decoy": spec.decoy_shape,
    }


def rig_truth(spec: SceneSpec) -> dict:
    return {"K": spec.K.model_dump(mode="json"), "T_gt": spec.T_gt.matrix.tolist()}


def write_scene(spec: SceneSpec, out_dir: str | Path) -> ManifestEntry:
    """Generates one scene and writes its cloud, mask and truth files."""
    out_dir = Path(out_dir)
    cloud = generate_scan(spec)
    rendered = render_mask(spec)
    cloud_name, mask_name, truth_name = f"{spec.scene_id}.ply", f"{spec.scene_id}_mask.pgm", f"{spec.scene_id}_truth.json"
    write_ply(out_dir / cloud_name, cloud)
    write_mask(out_dir / mask_name, rendered.mask)
    write_json(out_dir / truth_name, scene_truth(spec, rendered))
    logger.info(f"Scene {spec.scene_id}: {len(cloud)} points, "
                f"{int(np.count_nonzero(cloud.label == LABEL_SPHERE))} on the sphere")
    return ManifestEntry(scene_id=spec.scene_id, cloud=cloud_name, mask=mask_name, truth=truth_name,
                         seed=spec.seed, scan_mode=spec.pattern.mode, radius=spec.sphere.radius,
                         decoy=spec.decoy_shape is not None)


def generate_dataset(specs: Sequence[SceneSpec], out_dir: str | Path, config: Optional[dict] = None,
                     jobs: int = 1) -> Manifest:
    """
    Writes a dataset and its manifest.

    Scenes are generated in parallel up to `jobs` processes; the manifest
    lists them ordered by scene_id so the output does not depend on `jobs`.

    Args:
        specs (Sequence[SceneSpec]): Scenes to generate.
        out_dir (str | Path): Output directory, created when missing.
        config (Optional[dict]): Configuration snapshot stored in the manifest.
        jobs (int): Worker processes.

    Returns:
        Manifest: The written manifest.

    Raises:
        IoFailure: If the directory or a file cannot be written.
    """
    out = ensure_dir(out_dir)
    ordered = sorted(specs, key=lambda s: s.scene_id)
    if jobs > 1 and len(ordered) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(partial(write_scene, out_dir=out), ordered))
    else:
        entries = [write_scene(spec, out) for spec in ordered]
    rig = None
    if ordered:
        rig = "rig.json"
        write_json(out / rig, rig_truth(ordered[0]))
    manifest = Manifest(scenes=entries, rig=rig, config=config or {})
    write_json(out / "manifest.json", manifest.model_dump(mode="json"))
    logger.info(f"Dataset of {len(entries)} scenes written to {out}")
    return manifest
