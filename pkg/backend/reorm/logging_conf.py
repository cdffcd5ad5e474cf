"""JSON logging on stderr for the command-line tools and the oracle server."""

import logging
import sys
import uuid

from pythonjsonlogger.json import JsonFormatter

# per-request INFO lines
QUIET_LOGGERS = ("httpx", "httpcore", "PIL")

FIELD_NAMES = {
    "asctime": "time",
    "levelname": "level",
    "name": "logger",
    "filename": "file",
    "lineno": "line",
}


def setup_logging(level: str = "INFO", command: str | None = None, run_id: str | None = None) -> str:
    """Install a single stderr JSON handler on the root logger.

    stdout is left to command results (plan labels, report paths). Every
    record carries ``command`` and ``run_id`` so lines written by worker
    threads of one invocation can be grouped. Returns the run id.
    """
    run_id = run_id or uuid.uuid4().hex[:12]
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        JsonFormatter(
            "{asctime}{levelname}{name}{filename}{lineno}{message}",
            style="{",
            rename_fields=FIELD_NAMES,
            static_fields={"command": command or "-", "run_id": run_id},
        )
    )
    root = logging.getLogger()
    root.setLevel(level.upper())
    root.handlers = [handler]
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(root.level, logging.WARNING))
    return run_id
