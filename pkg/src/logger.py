import logging
import os
from logging.handlers import RotatingFileHandler

from .config import LOG_DIR, LOG_LEVEL

# Create logs directory if it doesn't exist
if not os.path.exists(LOG_DIR):  # pragma: no cover
    os.makedirs(LOG_DIR)

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[
        RotatingFileHandler(
            os.path.join(LOG_DIR, "macau.log"),
            maxBytes=1024 * 1024 * 5,
            backupCount=5,
        ),
        logging.StreamHandler(),
    ],
)


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def set_level(level: str) -> None:
    """Change the level of the root logger, e.g. from the ``--log-level`` flag."""
    logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))
