"""
Environment variable loader
Loads LAPRAN_* defaults from a .env file if it exists
"""

import logging
import os
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

DEFAULTS = {
    "LAPRAN_RUN_DIR": "runs",
    "LAPRAN_DATA_DIR": "data",
}


def load_env_file(env_file: Optional[Path] = None) -> int:
    """
    Load environment variables from a .env file if it exists

    Variables already set in the environment are never overridden.

    Args:
        env_file: File to read; defaults to ./.env

    Returns:
        Number of variables set from the file
    """
    env_file = Path(env_file) if env_file else Path.cwd() / ".env"
    loaded = 0

    if env_file.exists():
        logger.debug("Loading environment variables from %s", env_file)
        with open(env_file, "r") as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#") and "=" in line:
                    key, value = line.split("=", 1)
                    key, value = key.strip(), value.strip().strip('"').strip("'")
                    if key not in os.environ:
                        os.environ[key] = value
                        loaded += 1
    else:
        logger.debug("No .env file found, using system environment variables")

    for key, value in DEFAULTS.items():
        os.environ.setdefault(key, value)
    return loaded
