from pathlib import Path
from typing import NoReturn

from fastapi import HTTPException

from app.config import settings
from app.utilities.exceptions import ConfigError, IoFailure, SchemaMismatch, SphereCalibError
from app.utilities.logger import logger


def raise_http(error: SphereCalibError) -> NoReturn:
    """
    Maps a domain error to an HTTP error carrying its record.

    Config and schema errors give 422, I/O errors 500 and quality or
    pipeline failures 400.
    """
    if isinstance(error, (ConfigError, SchemaMismatch)):
        status = 422
    elif isinstance(error, IoFailure):
        status = 500
    else:
        status = 400
    logger.error(f"{error.code} at {error.stage}: {error.detail}")
    raise HTTPException(status_code=status, detail=error.to_record())


def data_path(relative: str) -> Path:
    """
    Resolves a request path inside the data directory.

    Raises:
        HTTPException: If the path escapes the data directory.
    """
    root = Path(settings.data_dir).resolve()
    path = (root / relative).resolve()
    if not path.is_relative_to(root):
        raise HTTPException(status_code=400, detail="path must stay inside the data directory")
    return path
