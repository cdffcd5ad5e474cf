import json
import logging

import pytest
from reorm.logging_conf import setup_logging


@pytest.fixture(autouse=True)
def _restore_root():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    quiet = {name: logging.getLogger(name).level for name in ("httpx", "httpcore", "PIL")}
    yield
    root.handlers = handlers
    root.setLevel(level)
    for name, lvl in quiet.items():
        logging.getLogger(name).setLevel(lvl)


def _format(message: str, **extra) -> dict:
    name = "reorm.services.bench_service"
    record = logging.LogRecord(name, logging.INFO, "/x/bench_service.py", 42, message, None, None)
    for key, value in extra.items():
        setattr(record, key, value)
    return json.loads(logging.getLogger().handlers[0].format(record))


def test_records_carry_command_and_run_id():
    assert setup_logging("debug", command="bench", run_id="abc123") == "abc123"
    line = _format("Benchmark finished", ok=3)

    assert line["level"] == "INFO"
    assert line["logger"] == "reorm.services.bench_service"
    assert line["file"] == "bench_service.py"
    assert line["line"] == 42
    assert line["message"] == "Benchmark finished"
    assert line["command"] == "bench"
    assert line["run_id"] == "abc123"
    assert line["ok"] == 3
    assert "time" in line
    assert logging.getLogger().level == logging.DEBUG


def test_single_handler_and_generated_run_id():
    first = setup_logging()
    second = setup_logging()
    assert len(logging.getLogger().handlers) == 1
    assert first != second
    assert _format("x")["command"] == "-"


def test_transport_loggers_are_quieted():
    setup_logging("DEBUG")
    assert logging.getLogger("httpx").level == logging.WARNING
    setup_logging("ERROR")
    assert logging.getLogger("httpx").level == logging.ERROR
