import json
from pathlib import Path
from typing import Annotated, Callable, Optional, TypeVar

import typer

from app.config import settings
from app.helpers import batch
from app.helpers.run_config import load_run_config, parse_overrides
from app.models.config import RunConfig
from app.utilities.exceptions import QUALITY_ERRORS, NotConverged, SphereCalibError
from app.utilities.logger import logger, set_level
from app.utilities.monitoring import capture, init_error_reporting

app = typer.Typer(help="Spherical-target LiDAR to camera extrinsic calibration.", no_args_is_help=True)

T = TypeVar("T")

ConfigOption = Annotated[Optional[Path], typer.Option("--config", help="Flat dotted-key config file.")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Seed of every generator, beats the config.")]
SetOption = Annotated[Optional[list[str]], typer.Option("--set", help="Config override key=value, repeatable.")]
JobsOption = Annotated[int, typer.Option("--jobs", min=1, help="Scenes processed in parallel.")]


def exit_code(error: SphereCalibError) -> int:
    """1 for calibration quality failures, 2 for everything else."""
    return 1 if isinstance(error, QUALITY_ERRORS) else 2


def _fail(error: SphereCalibError):
    logger.error(f"{error.code} at {error.stage}: {error.detail}")
    typer.echo(json.dumps(error.to_record()), err=True)
    raise typer.Exit(exit_code(error))


def _guarded(action: Callable[[], T]) -> T:
    try:
        return action()
    except SphereCalibError as error:
        _fail(error)
    except Exception as error:
        capture(error)
        raise


def _resolve(config: Optional[Path], overrides: Optional[list[str]], seed: Optional[int]) -> RunConfig:
    return load_run_config(config, parse_overrides(overrides or []), seed)


@app.callback()
def main(log_level: Annotated[Optional[str], typer.Option("--log-level", help="Logging level.")] = None):
    if log_level:
        set_level(log_level)
    init_error_reporting()


@app.command()
def simulate(
    out: Annotated[Path, typer.Option("--out", help="Dataset directory.")] = Path("dataset"),
    config: ConfigOption = None,
    seed: SeedOption = None,
    overrides: SetOption = None,
    jobs: JobsOption = settings.default_jobs,
):
    """Generate a synthetic dataset and print the manifest path."""
    manifest = _guarded(lambda: batch.cmd_simulate(_resolve(config, overrides, seed), out, jobs))
    typer.echo(str(manifest))


@app.command()
def calibrate(
    manifest: Annotated[Optional[Path], typer.Argument(help="Dataset manifest.")] = None,
    pairs: Annotated[Optional[Path], typer.Option("--pairs", help="Center pairs JSON instead of a dataset.")] = None,
    rig: Annotated[Optional[Path], typer.Option("--rig", help="Rig file with the intrinsics.")] = None,
    out: Annotated[Path, typer.Option("--out", help="Report path.")] = Path("report.json"),
    config: ConfigOption = None,
    seed: SeedOption = None,
    overrides: SetOption = None,
    jobs: JobsOption = settings.default_jobs,
):
    """Extract sphere centers, solve the extrinsics and write the report."""
    report = _guarded(lambda: batch.cmd_calibrate(_resolve(config, overrides, seed), out, manifest_path=manifest,
                                                  pairs_path=pairs, rig_path=rig, jobs=jobs))
    typer.echo(str(out))
    if not report.converged:
        _fail(NotConverged(f"solver stopped on {report.termination}", stage="solver"))


@app.command()
def evaluate(
    reports: Annotated[list[Path], typer.Argument(help="Calibration reports, one row each.")],
    truth: Annotated[Path, typer.Option("--truth", help="Rig or truth file with T_gt.")],
    out: Annotated[Optional[Path], typer.Option("--out", help="CSV destination.")] = None,
):
    """Print the error table of one or more reports."""
    table = _guarded(lambda: batch.cmd_evaluate(reports, truth, out))
    typer.echo(batch.format_table(table))


if __name__ == "__main__":
    app()
