"""Tests for the colored console logger."""

import logging

from progtrans.logger import END, GREEN, ColoredFormatter, setup_logger


def test_setup_is_idempotent():
    first = setup_logger("progtrans.test.idempotent")
    second = setup_logger("progtrans.test.idempotent")
    assert first is second
    assert len(first.handlers) == 1


def test_level_from_environment(monkeypatch):
    monkeypatch.setenv("PROGTRANS_LOG_LEVEL", "debug")
    assert setup_logger("progtrans.test.env_debug").level == logging.DEBUG
    monkeypatch.setenv("PROGTRANS_LOG_LEVEL", "nonsense")
    assert setup_logger("progtrans.test.env_bad").level == logging.INFO


def test_formatter_colors_copy_only():
    record = logging.LogRecord("x", logging.INFO, __file__, 1, "hello %s", ("there",), None)
    text = ColoredFormatter("[%(levelname)s] %(message)s").format(record)
    assert text == f"[{GREEN}INFO{END}] hello there"
    assert record.levelname == "INFO"
