import pytest

from app.helpers.run_config import dump_run_config, flatten, load_run_config, parse_overrides, read_config_file
from app.models.config import KernelEnum, RunConfig, ScanModeEnum
from app.utilities.exceptions import ConfigError, IoFailure


def test_defaults_without_sources():
    assert load_run_config() == RunConfig()


def test_file_then_overrides_then_seed(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# dataset\nsim.scenes = 12\nsim.scan_mode = solid_state  # grid\nsolver.kernel = cauchy\n"
                    "lidar.rng_seed = 3\n")
    config = load_run_config(path, parse_overrides(["sim.scenes=20", "sim.baseline=0.1, 0.0, 0.2"]), seed=99)
    assert config.sim.scenes == 20
    assert config.sim.scan_mode == ScanModeEnum.SOLID_STATE
    assert config.sim.baseline == (0.1, 0.0, 0.2)
    assert config.solver.kernel == KernelEnum.CAUCHY
    assert (config.camera.rng_seed, config.lidar.rng_seed, config.sim.rng_seed) == (99, 99, 99)


def test_null_values_reset_optional_keys():
    config = load_run_config(overrides={"lidar.extent_thresh": "0.05"})
    assert config.lidar.extent_thresh == 0.05
    assert load_run_config(overrides={"lidar.extent_thresh": "none"}).lidar.extent_thresh is None


@pytest.mark.parametrize("overrides", [
    {"lidar.unknown_key": "1"},
    {"nowhere.scenes": "1"},
    {"sim.scenes": "-1"},
    {"solver.kernel": "tukey"},
    {"sim.depth_min": "6"},
])
def test_invalid_values_are_config_errors(overrides):
    with pytest.raises(ConfigError):
        load_run_config(overrides=overrides)


def test_override_without_equals():
    with pytest.raises(ConfigError):
        parse_overrides(["sim.scenes"])


def test_malformed_file_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("sim.scenes = 3\njust words\n")
    with pytest.raises(ConfigError) as info:
        read_config_file(path)
    assert ":2:" in info.value.detail


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_run_config(tmp_path / "missing.cfg")


def test_dump_reads_back(tmp_path):
    config = load_run_config(overrides={"sim.corruption_preset": "mud", "lidar.extent_thresh": "0.04"}, seed=5)
    path = tmp_path / "dumped.cfg"
    path.write_text(dump_run_config(config))
    assert load_run_config(path) == config


def test_flatten_uses_dotted_keys():
    flat = flatten(RunConfig())
    assert flat["solver.huber_px"] == 2.0
    assert flat["sim.scan_mode"] == ScanModeEnum.SPINNING
    assert all(key.split(".")[0] in {"camera", "lidar", "solver", "sim"} for key in flat)
