from fastapi import APIRouter

from app.config import settings
from app.helpers import batch
from app.helpers.run_config import load_run_config
from app.models.calibration import CalibrationReport
from app.models.requests import CalibrationRequest
from app.utilities.exceptions import SphereCalibError
from app.utilities.http import data_path, raise_http

router = APIRouter()


@router.post("", status_code=201)
def create_calibration(request: CalibrationRequest) -> CalibrationReport:
    """
    Calibrates a dataset of the data directory and writes the report.

    Args:
    - request (CalibrationRequest): Manifest, report path, config overrides and seed.

    Returns:
    - CalibrationReport: The written report.

    Raises:
    - HTTPException: 400 when too few pairs survive, 422 for invalid
      configuration or inputs, 500 when files cannot be read or written.
    """
    manifest = data_path(request.manifest)
    report = data_path(request.report)
    try:
        config = load_run_config(None, request.overrides, request.seed)
        return batch.cmd_calibrate(config, report, manifest_path=manifest, jobs=settings.default_jobs)
    except SphereCalibError as error:
        raise_http(error)
