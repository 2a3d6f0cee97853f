import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

_DEFAULT_LEVEL = "INFO"
_PR_LOG_LEVEL = os.getenv("PR_LOG_LEVEL", _DEFAULT_LEVEL).upper() or _DEFAULT_LEVEL
try:
    PR_LOG_LEVEL = logging.getLevelNamesMapping()[_PR_LOG_LEVEL]  # Validate log level
except KeyError:
    print(f"Invalid PR_LOG_LEVEL '{_PR_LOG_LEVEL}'")
    sys.exit(1)


def get_basic_formatter() -> logging.Formatter:
    return logging.Formatter(
        "[%(name)s:%(levelname)s](%(asctime)s):`%(message)s`",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def get_basic_logger(name: str, level: int = PR_LOG_LEVEL) -> logging.Logger:
    """
    Creates and returns a basic logger with the specified name.

    Args:
        name (str): The name of the logger.

    Returns:
        logging.Logger: Configured logger instance.
    """
    logger = logging.getLogger(name)
    if not logger.hasHandlers():
        logger.setLevel(level)
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(get_basic_formatter())
        logger.addHandler(handler)
    return logger


def setup_file_logging(log_file_path: str | Path, level: int = logging.DEBUG) -> logging.FileHandler:
    """
    Creates a file handler and attaches it to the package root logger.

    Args:
        log_file_path: Path to the log file.
        level (int): Log level for the file handler. Defaults to DEBUG.

    Returns:
        logging.FileHandler: Configured file handler (detach it with `remove_file_logging`).
    """
    log_path = Path(log_file_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    file_handler = logging.FileHandler(log_path, mode="a", encoding="utf-8")
    file_handler.setLevel(level)
    file_handler.setFormatter(get_basic_formatter())
    for logger in _package_loggers():
        logger.addHandler(file_handler)
    return file_handler


def remove_file_logging(handler: logging.FileHandler) -> None:
    for logger in _package_loggers():
        logger.removeHandler(handler)
    handler.close()


def _package_loggers() -> list[logging.Logger]:
    # Module loggers own their handlers (see get_basic_logger), so attach to each of them.
    manager = logging.Logger.manager
    return [
        logger
        for name, logger in manager.loggerDict.items()
        if isinstance(logger, logging.Logger) and name.startswith("proto_rectify")
    ]


def seed_everything(seed: int) -> None:
    """Seed torch's global generator and switch torch to deterministic kernels."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def append_jsonl(path: str | Path, record: dict[str, Any]) -> None:
    """Append one canonical JSON record as a line."""
    with Path(path).open("a", encoding="utf-8") as stream:
        stream.write(canonical_json(record) + "\n")


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def content_hash(paths: Iterable[Path]) -> str:
    """Git-style content hash over a set of source files (sorted by path)."""
    digest = hashlib.sha256()
    for path in sorted(paths):
        data = path.read_bytes()
        digest.update(f"blob {len(data)}\0".encode())
        digest.update(data)
    return digest.hexdigest()


def package_source_hash() -> str:
    root = Path(__file__).parent
    return content_hash(root.rglob("*.py"))
