import sentry_sdk

from app.config import settings
from app.utilities.logger import logger

_enabled = False


def init_error_reporting() -> bool:
    """
    Starts Sentry outside development when a DSN is configured.

    Returns:
        bool: Whether error reporting is active.
    """
    global _enabled
    if settings.environment == "development" or not settings.sentry_dsn:
        return False
    if not _enabled:
        sentry_sdk.init(
            dsn=settings.sentry_dsn,
            traces_sample_rate=1.0,
            environment=settings.environment,
        )
        _enabled = True
        logger.info(f"Error reporting enabled for {settings.environment}")
    return True


def capture(error: BaseException):
    """Forwards an unexpected exception when error reporting is active."""
    if _enabled:
        sentry_sdk.capture_exception(error)
