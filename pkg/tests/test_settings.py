from __future__ import annotations

import io
import json
import logging

import pytest

from linklab.logging_utils import configure_logging
from linklab.settings import RuntimeSettings


def test_settings_defaults(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("LINKLAB_THREADS", raising=False)
    monkeypatch.delenv("LINKLAB_LOG_LEVEL", raising=False)
    assert RuntimeSettings.from_env() == RuntimeSettings(threads=1, log_level="INFO")


def test_settings_read_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("LINKLAB_THREADS", "4")
    monkeypatch.setenv("LINKLAB_LOG_LEVEL", "debug")
    assert RuntimeSettings.from_env() == RuntimeSettings(threads=4, log_level="DEBUG")


@pytest.mark.parametrize("value", ["0", "-2", "two"])
def test_invalid_thread_count_names_the_variable(monkeypatch: pytest.MonkeyPatch, value: str) -> None:
    monkeypatch.setenv("LINKLAB_THREADS", value)
    with pytest.raises(ValueError, match="LINKLAB_THREADS"):
        RuntimeSettings.from_env()


def test_invalid_log_level(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("LINKLAB_LOG_LEVEL", "LOUD")
    with pytest.raises(ValueError, match="LINKLAB_LOG_LEVEL"):
        RuntimeSettings.from_env()


def test_structured_logs_carry_extra_fields() -> None:
    stream = io.StringIO()
    logger = configure_logging("INFO", stream)
    try:
        logging.getLogger("linklab.training").info("train_step", extra={"iteration": 3, "L_G": 0.5})
        logging.getLogger("linklab.training").debug("regularizer_step", extra={"iteration": 3})
    finally:
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
        logger.setLevel(logging.NOTSET)

    lines = stream.getvalue().splitlines()
    assert len(lines) == 1
    payload = json.loads(lines[0])
    assert payload == {
        "level": "INFO",
        "logger": "linklab.training",
        "event": "train_step",
        "iteration": 3,
        "L_G": 0.5,
    }


def test_configure_logging_replaces_previous_handler() -> None:
    logger = configure_logging("INFO", io.StringIO())
    configure_logging("WARNING", io.StringIO())
    try:
        assert len(logger.handlers) == 1
        assert logger.level == logging.WARNING
    finally:
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
        logger.setLevel(logging.NOTSET)
