"""Shared utilities, logging setup, and constants for DeskDownscale."""

import hashlib
import json
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Optional

# Application constants
APP_NAME = "DeskDownscale"
LOGGER_ROOT = "deskdownscale"
LOG_FILE_NAME = "deskdownscale.log"

# Logging configuration
LOG_MAX_BYTES = 10 * 1024 * 1024  # 10 MB
LOG_BACKUP_COUNT = 5
LOG_FORMAT = "%(asctime)s.%(msecs)03d [%(levelname)s] [%(threadName)s] %(name)s: %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# Channel layout shared by every dataset (t2m in K, winds in m/s, msl in hPa)
STATE_CHANNELS = (("t2m", "K"), ("u10", "m s-1"), ("v10", "m s-1"), ("msl", "hPa"))
STATIC_CHANNELS = (("z", "km"), ("lsm", "1"))

# Logger instance cache
_loggers: dict[str, logging.Logger] = {}
_logging_initialized = False


def setup_logging(level: int = logging.WARNING, log_file: Optional[Path] = None) -> None:
    """
    Initialize the logging system with file and console handlers.

    Args:
        level: The logging level (e.g., logging.WARNING, logging.INFO)
        log_file: Optional path of a rotating log file; console only if None
    """
    global _logging_initialized

    root_logger = logging.getLogger(LOGGER_ROOT)
    root_logger.setLevel(level)

    # Prevent propagation to root logger
    root_logger.propagate = False

    if _logging_initialized:
        for handler in root_logger.handlers:
            handler.setLevel(level)
    else:
        root_logger.handlers.clear()

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(level)
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT))
        root_logger.addHandler(console_handler)
        _logging_initialized = True

    if log_file is not None:
        add_log_file(log_file, level)


def add_log_file(log_file: Path, level: Optional[int] = None) -> None:
    """
    Attach a rotating file handler to the application logger.

    Args:
        log_file: Path of the log file (parent directory is created)
        level: Handler level, defaults to the logger's current level
    """
    root_logger = logging.getLogger(LOGGER_ROOT)
    target = str(Path(log_file).resolve())

    for handler in root_logger.handlers:
        if isinstance(handler, RotatingFileHandler) and handler.baseFilename == target:
            return

    try:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=LOG_MAX_BYTES,
            backupCount=LOG_BACKUP_COUNT,
            encoding="utf-8"
        )
        file_handler.setLevel(level if level is not None else root_logger.level)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT))
        root_logger.addHandler(file_handler)
        root_logger.info(f"Logging to {log_file}")
    except Exception as e:
        # Fall back to console only if file logging fails
        print(f"Warning: Could not create log file: {e}", file=sys.stderr)


def set_log_level(verbose: bool) -> None:
    """
    Change the logging level at runtime.

    Args:
        verbose: If True, set level to INFO. If False, set level to WARNING.
    """
    level = logging.INFO if verbose else logging.WARNING
    root_logger = logging.getLogger(LOGGER_ROOT)
    root_logger.setLevel(level)

    for handler in root_logger.handlers:
        handler.setLevel(level)

    if verbose:
        root_logger.info("Verbose logging enabled")


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance for the specified module.

    Args:
        name: The name of the module (typically __name__)

    Returns:
        A configured logger instance
    """
    if name in _loggers:
        return _loggers[name]

    if name.startswith(f"{LOGGER_ROOT}.") or name == LOGGER_ROOT:
        logger_name = name
    else:
        module_name = name.split(".")[-1]
        logger_name = f"{LOGGER_ROOT}.{module_name}"

    logger = logging.getLogger(logger_name)
    _loggers[name] = logger

    return logger


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no whitespace variation."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def hash_json(obj: Any) -> str:
    """
    SHA-256 of the canonical JSON form of an object.

    Args:
        obj: Any JSON-serializable object

    Returns:
        Hex digest
    """
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def hash_file(path: Path) -> str:
    """
    SHA-256 hex digest of a file's contents.

    Args:
        path: File to hash

    Returns:
        Hex digest
    """
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path: Path, payload: Any) -> None:
    """
    Write a JSON document with stable formatting.

    Args:
        path: Output path (parent directory is created)
        payload: JSON-serializable object
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
