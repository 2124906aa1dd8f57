"""Module to provide a custom logging setup"""

import logging
import os

# https://en.wikipedia.org/wiki/ANSI_escape_code#Colors
END: str = "\33[0m"
RED: str = "\33[31m"
GREEN: str = "\33[32m"
YELLOW: str = "\33[33m"
BLUE: str = "\33[94m"

LOG_LEVEL_ENV: str = "PROGTRANS_LOG_LEVEL"
DEFAULT_LOG_LEVEL: str = "INFO"


class ColoredFormatter(logging.Formatter):
    """Formats log messages with color based on severity level."""

    LOG_LEVEL_COLOR = {
        logging.CRITICAL: RED,
        logging.ERROR: RED,
        logging.WARNING: YELLOW,
        logging.INFO: GREEN,
        logging.DEBUG: BLUE,
    }

    def format(self, record: logging.LogRecord) -> str:
        """
        Format the log record with color based on log level.

        The record is copied first so other handlers keep the plain level name.

        **Parameters:**
            - `record`: The log record to format.

        **Returns:**
            Formatted log message.
        """
        color = ColoredFormatter.LOG_LEVEL_COLOR.get(record.levelno)
        if color:
            record = logging.makeLogRecord(record.__dict__)
            record.levelname = f"{color}{record.levelname}{END}"

        return super().format(record)


def _level_from_env() -> int:
    name = os.getenv(LOG_LEVEL_ENV, DEFAULT_LOG_LEVEL).upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def setup_logger(name: str) -> logging.Logger:
    """
    Configure and return a custom logger.

    Creates a logger with the given name and a colored console handler. The
    level is read from the `PROGTRANS_LOG_LEVEL` environment variable
    (default INFO). Calling it again for the same name returns the same
    logger without stacking handlers.

    **Parameters:**
        - `name`: The name of the logger to be created.

    **Returns:**
        The configured logger instance.
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(
        ColoredFormatter(
            "%(asctime)s [%(levelname)s] %(name)s: %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    )

    logger.addHandler(console_handler)
    logger.setLevel(_level_from_env())

    return logger
