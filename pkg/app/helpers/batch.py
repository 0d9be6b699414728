from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.helpers.calibration_solver import calibrate_pairs, evaluate_against_truth
from app.helpers.camera_pipeline import extract_ellipse_center, segment_masks
from app.helpers.lidar_pipeline import extract_sphere_center
from app.helpers.scene_simulator import build_scene_specs, generate_dataset
from app.models.calibration import CalibrationReport, CenterPair, ErrorMetrics, SceneDiagnostics
from app.models.config import RunConfig
from app.models.geometry import CameraIntrinsics, RigidTransform
from app.models.lidar import ClusterStat
from app.models.scene import Manifest, ManifestEntry
from app.utilities.exceptions import SchemaMismatch, SphereCalibError, TooFewPairs
from app.utilities.files import (
    ensure_dir,
    read_cloud,
    read_gray,
    read_json,
    read_mask,
    read_pairs,
    write_json,
    write_table,
)
from app.utilities.logger import logger

NOT_AVAILABLE = "N/A"
METRIC_COLUMNS = ["configuration", "trans_err_m", "rot_err_deg", "reproj_px"]


def cmd_simulate(config: RunConfig, out_dir: str | Path, jobs: int = 1) -> Path:
    """
    Generates a synthetic dataset.

    Returns:
        Path: The written manifest.

    Raises:
        IoFailure: If the output directory cannot be written.
        SphereNotVisible: If a scene cannot place its sphere.
    """
    specs = build_scene_specs(config.sim)
    generate_dataset(specs, out_dir, config=config.model_dump(mode="json"), jobs=jobs)
    return Path(out_dir) / "manifest.json"


def load_rig(path: str | Path) -> tuple[CameraIntrinsics, Optional[RigidTransform]]:
    """
    Reads intrinsics and, when present, the ground-truth transform of a rig file.

    Raises:
        SchemaMismatch: If the file lacks intrinsics or holds invalid values.
    """
    payload = read_json(path)
    try:
        K = CameraIntrinsics.model_validate(payload["K"])
        T_gt = RigidTransform.from_matrix(payload["T_gt"]) if payload.get("T_gt") is not None else None
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise SchemaMismatch(f"{path}: malformed rig ({e})")
    return K, T_gt


def load_manifest(path: str | Path) -> Manifest:
    try:
        return Manifest.model_validate(read_json(path))
    except ValidationError as e:
        raise SchemaMismatch(f"{path}: malformed manifest ({e.error_count()} errors)")


def scene_masks(path: Path, scene_id: str, config: RunConfig) -> dict[str, np.ndarray]:
    """Candidate masks of a scene image, split by the segmenter when `camera.mask_source` is segment."""
    if config.camera.mask_source == "file":
        return {scene_id: read_mask(path)}
    components = segment_masks(read_gray(path), config.camera.segment_threshold, config.camera.min_component_px)
    logger.debug(f"Scene {scene_id}: {len(components)} components above gray level {config.camera.segment_threshold}")
    return {f"{scene_id}_{i}": mask for i, mask in enumerate(components)}


def process_scene(indexed: tuple[int, ManifestEntry], base_dir: Path, K: CameraIntrinsics,
                  config: RunConfig) -> tuple[SceneDiagnostics, list[ClusterStat]]:
    """
    Extracts both centers of one scene.

    Failures of either pipeline skip the scene; its diagnostics carry the
    error record. Generators are derived from the scene's position in the
    manifest so results do not depend on the worker count.
    """
    index, entry = indexed
    try:
        cloud = read_cloud(base_dir / entry.cloud)
        masks = scene_masks(base_dir / entry.mask, entry.scene_id, config)
        lidar = extract_sphere_center(cloud, entry.scan_mode, entry.radius, config.lidar,
                                      np.random.default_rng([config.lidar.rng_seed, index]))
        camera = extract_ellipse_center(masks, K, config.camera,
                                        np.random.default_rng([config.camera.rng_seed, index]))
    except SphereCalibError as error:
        logger.warning(f"Scene {entry.scene_id} skipped: {error.code} at {error.stage}: {error.detail}")
        return SceneDiagnostics(scene_id=entry.scene_id, paired=False, error=error.to_record()), []
    logger.info(f"Scene {entry.scene_id}: verdict {camera.verdict.value}, {lidar.hypotheses} hypotheses")
    diagnostics = SceneDiagnostics(
        scene_id=entry.scene_id,
        paired=True,
        verdict=camera.verdict,
        mask_residual_px=camera.mean_residual,
        roi_points=lidar.roi_points,
        representatives=lidar.representatives,
        hypotheses=lidar.hypotheses,
        ground_found=lidar.ground_found,
        p_lidar=lidar.center,
        p_cam=camera.center,
    )
    return diagnostics, lidar.clusters


def extract_pairs(manifest: Manifest, base_dir: Path, K: CameraIntrinsics, config: RunConfig,
                  jobs: int = 1) -> list[tuple[SceneDiagnostics, list[ClusterStat]]]:
    """Runs `process_scene` over the manifest, ordered by scene_id."""
    ordered = list(enumerate(sorted(manifest.scenes, key=lambda e: e.scene_id)))
    worker = partial(process_scene, base_dir=base_dir, K=K, config=config)
    if jobs > 1 and len(ordered) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(worker, ordered))
    return [worker(item) for item in ordered]


def _write_cluster_tables(out_dir: Path, outcomes: Sequence[tuple[SceneDiagnostics, list[ClusterStat]]]):
    for diagnostics, clusters in outcomes:
        if clusters:
            table = pd.DataFrame([c.model_dump() for c in clusters])
            write_table(out_dir / f"clusters_{diagnostics.scene_id}.csv", table)


def cmd_calibrate(config: RunConfig, out: str | Path, manifest_path: Optional[str | Path] = None,
                  pairs_path: Optional[str | Path] = None, rig_path: Optional[str | Path] = None,
                  jobs: int = 1) -> CalibrationReport:
    """
    Calibrates from a dataset manifest or from precomputed center pairs.

    Skipped scenes never abort the run; only the pair count gate is fatal.
    The report embeds the resolved configuration and, when the rig file
    holds T_gt, the errors against it.

    Args:
        config (RunConfig): Resolved configuration.
        out (str | Path): Report path; cluster tables go next to it.
        manifest_path (Optional[str | Path]): Dataset manifest.
        pairs_path (Optional[str | Path]): Center pairs file, used instead of a manifest.
        rig_path (Optional[str | Path]): Rig file, the manifest's own by default.
        jobs (int): Worker processes.

    Returns:
        CalibrationReport: The written report.

    Raises:
        TooFewPairs: If fewer than `solver.min_pairs` pairs survive.
        SchemaMismatch: If no rig file is available or inputs are malformed.
        IoFailure: If a file cannot be read or written.
    """
    out = Path(out)
    ensure_dir(out.parent)
    if pairs_path is not None:
        if rig_path is None:
            raise SchemaMismatch("calibrating from pairs needs a rig file with the intrinsics")
        K, T_gt = load_rig(rig_path)
        pairs = read_pairs(pairs_path)
        scenes = [SceneDiagnostics(scene_id=p.scene_id, paired=True, p_lidar=p.p_lidar, p_cam=p.p_cam)
                  for p in sorted(pairs, key=lambda p: p.scene_id)]
        source = str(pairs_path)
    else:
        if manifest_path is None:
            raise SchemaMismatch("either a manifest or a pairs file is required")
        manifest = load_manifest(manifest_path)
        if len(manifest.scenes) < config.solver.min_pairs:
            raise TooFewPairs(f"{len(manifest.scenes)} scenes, {config.solver.min_pairs} pairs required")
        base_dir = Path(manifest_path).parent
        if rig_path is None and manifest.rig is None:
            raise SchemaMismatch(f"{manifest_path} names no rig file")
        K, T_gt = load_rig(rig_path or base_dir / manifest.rig)
        outcomes = extract_pairs(manifest, base_dir, K, config, jobs)
        _write_cluster_tables(out.parent, outcomes)
        scenes = [diagnostics for diagnostics, _ in outcomes]
        pairs = [CenterPair(scene_id=d.scene_id, p_lidar=d.p_lidar, p_cam=d.p_cam) for d in scenes if d.paired]
        logger.info(f"{len(pairs)} of {len(scenes)} scenes paired")
        source = str(manifest_path)

    result = calibrate_pairs(pairs, K, config.solver)
    scenes = [
        d.model_copy(update={"residual_px": result.per_pair_residual.get(d.scene_id),
                             "rejected": d.scene_id in result.rejected_ids})
        for d in scenes
    ]
    report = CalibrationReport(
        source=source,
        transform=result.transform,
        rms_reprojection=result.rms_reprojection,
        iterations=result.iterations,
        converged=result.converged,
        termination=result.termination,
        pairs_used=len(result.accepted_ids),
        rejected_ids=result.rejected_ids,
        scenes=scenes,
        metrics=evaluate_against_truth(result, T_gt) if T_gt is not None else None,
        config=config.model_dump(mode="json"),
    )
    write_json(out, report.model_dump(mode="json"))
    logger.info(f"Report written to {out}")
    return report


def _truth_transform(path: str | Path) -> RigidTransform:
    path = Path(path)
    if not path.is_file():
        raise SchemaMismatch(f"truth file {path} is missing")
    payload = read_json(path)
    try:
        return RigidTransform.from_matrix(payload["T_gt"])
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise SchemaMismatch(f"{path}: no valid T_gt ({e})")


def _metric_row(metrics: ErrorMetrics) -> dict:
    if not metrics.within_bounds:
        return {"configuration": metrics.label, "trans_err_m": NOT_AVAILABLE,
                "rot_err_deg": NOT_AVAILABLE, "reproj_px": NOT_AVAILABLE}
    return {"configuration": metrics.label, "trans_err_m": metrics.trans_err_m,
            "rot_err_deg": metrics.rot_err_deg, "reproj_px": metrics.rms_px}


def cmd_evaluate(reports: Sequence[str | Path], truth: str | Path,
                 out_csv: Optional[str | Path] = None) -> pd.DataFrame:
    """
    Tabulates translation, rotation and reprojection errors of reports.

    Rows outside the plausibility bounds show N/A.

    Args:
        reports (Sequence[str | Path]): Calibration reports, one row each.
        truth (str | Path): Rig or truth file holding T_gt.
        out_csv (Optional[str | Path]): CSV destination.

    Returns:
        pd.DataFrame: One row per report.

    Raises:
        SchemaMismatch: If the truth file is missing or a report is malformed.
    """
    T_gt = _truth_transform(truth)
    rows = []
    for path in reports:
        try:
            report = CalibrationReport.model_validate(read_json(path))
        except ValidationError as e:
            raise SchemaMismatch(f"{path}: malformed report ({e.error_count()} errors)")
        metrics = evaluate_against_truth(report.transform, T_gt, rms_px=report.rms_reprojection,
                                         label=Path(path).stem)
        rows.append(_metric_row(metrics))
    table = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    if out_csv is not None:
        write_table(out_csv, table)
    return table


def format_table(table: pd.DataFrame) -> str:
    return table.to_string(index=False, float_format=lambda x: f"{x:.4f}")
