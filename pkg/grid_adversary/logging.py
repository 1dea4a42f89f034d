import inspect
import logging
import sys

from loguru import logger

STDOUT_FORMAT = "[{thread.name}] {time:YYYY-MM-DD HH:mm:ss} <level>{level}</level> {message}"
FILE_FORMAT = "[{thread.name}] {time:YYYY-MM-DD HH:mm:ss.SSS} {level} {name}:{function}:{line} {message}"

# stdlib loggers of the oracle's server and client stack
FORWARDED_LOGGERS = ("uvicorn", "uvicorn.error", "uvicorn.access", "httpx")


class InterceptHandler(logging.Handler):
    """Forwards stdlib ``logging`` records to loguru."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            level: str | int = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        # find the caller outside of the logging module so {name}:{function}:{line} are meaningful
        frame, depth = inspect.currentframe(), 0
        while frame is not None and (depth == 0 or frame.f_code.co_filename == logging.__file__):
            frame = frame.f_back
            depth += 1

        logger.opt(depth=depth, exception=record.exc_info).log(level, record.getMessage())


def configure_logging(stdout_level: str = "INFO", log_file: str | None = None) -> None:
    # remove the default handler
    logger.remove()
    logger.add(sys.stdout, colorize=True, level=stdout_level, format=STDOUT_FORMAT)

    if log_file is not None:
        logger.add(log_file, level="DEBUG", format=FILE_FORMAT)

    for name in FORWARDED_LOGGERS:
        forwarded = logging.getLogger(name)
        forwarded.handlers = [InterceptHandler()]
        forwarded.propagate = False
