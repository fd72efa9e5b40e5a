import logging
import os
from typing import List, Optional

from config import Config

LOG_FILE_NAME = "scram.log"
FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger("scram")

_log_dir: Optional[str] = None
_handlers: List[logging.Handler] = []


def configure_logging(level: Optional[str] = None, log_dir: Optional[str] = None) -> logging.Logger:
    """Send records to stderr and, when log_dir is set, to <log_dir>/scram.log."""
    global _log_dir
    level = (level or Config.LOG_LEVEL).upper()
    root = logging.getLogger()
    root.setLevel(getattr(logging, level, logging.INFO))
    while _handlers:
        handler = _handlers.pop()
        root.removeHandler(handler)
        handler.close()

    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter(FORMAT))
    _handlers.append(stream)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, LOG_FILE_NAME))
        file_handler.setFormatter(logging.Formatter(FORMAT))
        _handlers.append(file_handler)
        _log_dir = log_dir

    for handler in _handlers:
        root.addHandler(handler)
    return logger


def configured_handlers() -> List[logging.Handler]:
    return list(_handlers)


def log_message(message: str, level: str = "info"):
    """Log a message to the configured handlers."""
    if level == "info":
        logger.info(message)
    elif level == "warning":
        logger.warning(message)
    elif level == "error":
        logger.error(message)
    else:
        logger.debug(message)


def get_logs(n: int = 50) -> List[str]:
    """Return last n log lines of the file log."""
    if _log_dir is None:
        return ["No logs yet."]
    log_file = os.path.join(_log_dir, LOG_FILE_NAME)
    if not os.path.exists(log_file):
        return ["No logs yet."]
    with open(log_file, "r") as f:
        lines = f.readlines()
        return lines[-n:]
