from fastapi import APIRouter

from app.config import settings
from app.helpers import batch
from app.helpers.run_config import load_run_config
from app.models.requests import SimulationRequest
from app.models.scene import Manifest
from app.utilities.exceptions import SphereCalibError
from app.utilities.files import read_json
from app.utilities.http import data_path, raise_http

router = APIRouter()


@router.post("", status_code=201)
def create_dataset(request: SimulationRequest) -> Manifest:
    """
    Generates a synthetic dataset under the data directory.

    Args:
    - request (SimulationRequest): Output directory, config overrides and seed.

    Returns:
    - Manifest: The written manifest.

    Raises:
    - HTTPException: 422 for invalid configuration, 500 when files cannot be written.
    """
    out_dir = data_path(request.out_dir)
    try:
        config = load_run_config(None, request.overrides, request.seed)
        manifest_path = batch.cmd_simulate(config, out_dir, settings.default_jobs)
        return Manifest.model_validate(read_json(manifest_path))
    except SphereCalibError as error:
        raise_http(error)
