import json

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from app.cli import app
from app.helpers.geometry import project_points
from app.models.calibration import CalibrationReport, CenterPair
from app.utilities.files import write_json, write_pairs

runner = CliRunner()

CLEAN_DATASET = """\
sim.frames = 3
sim.sigma0 = 0
sim.incidence_gain = 0
sim.clutter_rate = 0
sim.mask_jitter_px = 0
sim.clutter_boxes = 0
lidar.combo_cap = 20000
"""


def _error_record(output: str) -> dict:
    lines = [line for line in output.splitlines() if line.startswith('{"error"')]
    assert lines, output
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def clean_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "clean.cfg"
    path.write_text(CLEAN_DATASET)
    return path


@pytest.fixture(scope="module")
def dataset(clean_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    result = runner.invoke(app, ["simulate", "--out", str(out), "--config", str(clean_config), "--seed", "7",
                                 "--set", "sim.scenes=10"])
    assert result.exit_code == 0, result.output
    return out


def test_simulate_writes_the_manifest(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert [entry["scene_id"] for entry in manifest["scenes"]] == [f"scene_{i:03d}" for i in range(10)]
    assert manifest["rig"] == "rig.json"
    assert manifest["config"]["sim"]["rng_seed"] == 7


def test_seed_changes_the_dataset(clean_config, tmp_path):
    manifests = []
    for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
        result = runner.invoke(app, ["simulate", "--out", str(tmp_path / name), "--config", str(clean_config),
                                     "--seed", seed, "--set", "sim.scenes=1", "--set", "sim.frames=1"])
        assert result.exit_code == 0, result.output
        manifests.append((tmp_path / name / "scene_000_truth.json").read_bytes())
    assert manifests[0] == manifests[1]
    assert manifests[0] != manifests[2]


def test_calibrate_and_evaluate(dataset, tmp_path):
    report_path = tmp_path / "clean.json"
    result = runner.invoke(app, ["calibrate", str(dataset / "manifest.json"), "--out", str(report_path)])
    assert result.exit_code == 0, result.output
    report = CalibrationReport.model_validate_json(report_path.read_text())
    assert report.converged
    assert report.pairs_used >= 8
    assert report.metrics.trans_err_m < 1e-3
    assert report.metrics.rot_err_deg < 0.05
    assert [scene.scene_id for scene in report.scenes] == sorted(scene.scene_id for scene in report.scenes)
    assert list(tmp_path.glob("clusters_scene_*.csv"))

    csv = tmp_path / "errors.csv"
    result = runner.invoke(app, ["evaluate", str(report_path), "--truth", str(dataset / "rig.json"),
                                 "--out", str(csv)])
    assert result.exit_code == 0, result.output
    assert "clean" in result.output
    table = pd.read_csv(csv)
    assert table["configuration"].tolist() == ["clean"]
    assert table["trans_err_m"].iloc[0] == pytest.approx(report.metrics.trans_err_m, abs=1e-6)


def test_calibrate_with_segmented_masks(dataset, tmp_path):
    report_path = tmp_path / "segmented.json"
    result = runner.invoke(app, ["calibrate", str(dataset / "manifest.json"), "--out", str(report_path),
                                 "--set", "camera.mask_source=segment"])
    assert result.exit_code == 0, result.output
    report = CalibrationReport.model_validate_json(report_path.read_text())
    assert report.config["camera"]["mask_source"] == "segment"
    assert report.pairs_used >= 8
    assert report.metrics.trans_err_m < 1e-3
    assert report.metrics.rot_err_deg < 0.05


def _median_errors(tmp_path, seeds, *overrides):
    rows = []
    for seed in seeds:
        out = tmp_path / f"seed_{seed}"
        args = ["simulate", "--out", str(out), "--seed", str(seed)]
        for override in overrides:
            args += ["--set", override]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        result = runner.invoke(app, ["calibrate", str(out / "manifest.json"), "--out", str(out / "report.json")])
        assert result.exit_code == 0, result.output
        rows.append(CalibrationReport.model_validate_json((out / "report.json").read_text()).metrics.model_dump())
    return pd.DataFrame(rows)[["trans_err_m", "rot_err_deg", "rms_px"]].median()


@pytest.mark.slow
def test_noisy_scenes_calibrate_within_bounds(tmp_path):
    errors = _median_errors(tmp_path, range(5))
    assert errors["trans_err_m"] <= 0.04
    assert errors["rot_err_deg"] <= 0.6
    assert errors["rms_px"] <= 2.2


@pytest.mark.slow
def test_truncated_masks_calibrate_within_bounds(tmp_path):
    errors = _median_errors(tmp_path, range(5), "sim.truncation_frac=0.25")
    assert errors["trans_err_m"] <= 0.07
    assert errors["rot_err_deg"] <= 1.7


def test_calibrate_from_pairs(K, T_gt, rng, tmp_path):
    points = np.column_stack([rng.uniform(2, 5, 10), rng.uniform(-1, 1, 10), rng.uniform(-0.5, 0.3, 10)])
    pixels = project_points(T_gt.apply(points), K)
    pairs = [CenterPair(scene_id=f"p{i}", p_lidar=p, p_cam=uv) for i, (p, uv) in enumerate(zip(points, pixels))]
    write_pairs(tmp_path / "pairs.json", pairs)
    write_json(tmp_path / "rig.json", {"K": K.model_dump(mode="json"), "T_gt": T_gt.matrix.tolist()})
    result = runner.invoke(app, ["calibrate", "--pairs", str(tmp_path / "pairs.json"),
                                 "--rig", str(tmp_path / "rig.json"), "--out", str(tmp_path / "report.json")])
    assert result.exit_code == 0, result.output
    report = CalibrationReport.model_validate_json((tmp_path / "report.json").read_text())
    assert report.metrics.trans_err_m < 1e-6


def test_too_few_pairs_exits_with_one(clean_config, tmp_path):
    out = tmp_path / "small"
    result = runner.invoke(app, ["simulate", "--out", str(out), "--config", str(clean_config),
                                 "--set", "sim.scenes=3", "--set", "sim.frames=1"])
    assert result.exit_code == 0, result.output
    result = runner.invoke(app, ["calibrate", str(out / "manifest.json"), "--set", "solver.min_pairs=6",
                                 "--out", str(tmp_path / "report.json")])
    assert result.exit_code == 1
    assert _error_record(result.output)["error"] == "TooFewPairs"


def test_invalid_override_exits_with_two(tmp_path):
    result = runner.invoke(app, ["simulate", "--out", str(tmp_path), "--set", "sim.scenes=-3"])
    assert result.exit_code == 2
    assert _error_record(result.output)["error"] == "ConfigError"


def test_unwritable_output_exits_with_two(clean_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    result = runner.invoke(app, ["simulate", "--out", str(blocker / "dataset"), "--config", str(clean_config),
                                 "--set", "sim.scenes=1"])
    assert result.exit_code == 2
    assert _error_record(result.output)["error"] == "IoFailure"


def test_calibrate_needs_an_input(tmp_path):
    result = runner.invoke(app, ["calibrate", "--out", str(tmp_path / "report.json")])
    assert result.exit_code == 2
    assert _error_record(result.output)["error"] == "SchemaMismatch"


def test_evaluate_without_truth_file(tmp_path):
    result = runner.invoke(app, ["evaluate", str(tmp_path / "report.json"), "--truth", str(tmp_path / "none.json")])
    assert result.exit_code == 2
    record = _error_record(result.output)
    assert record["error"] == "SchemaMismatch"
    assert "missing" in record["detail"]
