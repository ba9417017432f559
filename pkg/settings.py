"""
Runtime settings read from the environment (optionally through a .env file).

Nothing here is required; every variable has a default so experiments
reproduce from the config document alone.
"""
import logging
import os

from dotenv import load_dotenv

load_dotenv()

ARTIFACT_VERSION = "0.3.0"

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _env_bool(name: str, default: bool) -> bool:
    """Parse boolean env flags consistently."""
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        raise RuntimeError(f"Environment variable {name} must be an integer, got {raw!r}")


def _env_str(name: str, default: str) -> str:
    raw = os.getenv(name)
    return raw.strip() if raw and raw.strip() else default


LOG_DIR = _env_str("LAB_LOG_DIR", "./logs")
LOG_LEVEL = _env_str("LAB_LOG_LEVEL", "INFO").upper()
LOG_TO_FILE = _env_bool("LAB_LOG_TO_FILE", True)
DEFAULT_WORKERS = max(1, _env_int("LAB_WORKERS", 1))


def configure_logging(log_name: str = "lab.log") -> None:
    """Set up root logging the same way for every entry point."""
    handlers = [logging.StreamHandler()]
    if LOG_TO_FILE:
        os.makedirs(LOG_DIR, exist_ok=True)
        handlers.insert(0, logging.FileHandler(os.path.join(LOG_DIR, log_name)))
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
