"""
Logging setup shared by the command line entry points
"""
import logging
from pathlib import Path
from typing import Optional

from config.settings import LOGGING_CONFIG


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure the root logger once from LOGGING_CONFIG; stderr unless a log file is set."""
    log_file = log_file or LOGGING_CONFIG["log_file"]
    level_name = (level or LOGGING_CONFIG["log_level"]).upper()
    kwargs = {
        "level": getattr(logging, level_name, logging.INFO),
        "format": LOGGING_CONFIG["log_format"],
    }
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        kwargs["filename"] = str(log_file)
        kwargs["filemode"] = LOGGING_CONFIG["file_mode"]
    logging.basicConfig(**kwargs)
