from fastapi import APIRouter, HTTPException

from app.helpers.run_config import flatten
from app.helpers.scene_simulator import PRESETS
from app.models.config import RunConfig, ScanModeEnum

router = APIRouter()


@router.get("/{entity}", status_code=200)
async def get_info_by_entity(entity: str) -> list | dict:
    """
    Retrieves reference data of the calibration toolkit.

    Args:
    entity (str): 'config' for the documented defaults of every run
        configuration key, 'presets' for the corruption presets or 'modes'
        for the scan modes.

    Returns:
    list | dict: The requested entries.

    Raises:
    HTTPException: If the entity type is not supported.
    """
    if entity == "config":
        return flatten(RunConfig())
    if entity == "presets":
        return list(PRESETS)
    if entity == "modes":
        return [mode.value for mode in ScanModeEnum]
    raise HTTPException(status_code=400, detail="Unsupported entity type")
