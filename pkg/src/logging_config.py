"""
Logging configuration for the sdr-pesq denoising toolkit.

A dedicated ``sdr_pesq`` logger emits JSON records to stderr and, optionally, to
a rotating file. The root logger is left alone so the toolkit can be embedded in
training scripts that configure logging themselves.
"""
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

from pythonjsonlogger.json import JsonFormatter


LOGGER_NAME = "sdr_pesq"

# Libraries whose chatter is capped at THIRD_PARTY_LOG_LEVEL.
THIRD_PARTY_LOGGERS = (
    "torch",
    "anyio",
    "soundfile",
    "numpy",
    "asyncio",
)


class SdrPesqJsonFormatter(JsonFormatter):
    """JSON formatter adding timestamp, call site and process/thread ids."""

    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)

        if not log_record.get("timestamp"):
            log_record["timestamp"] = self.formatTime(record, self.datefmt)

        log_record["level"] = record.levelname
        log_record["logger"] = record.name
        # child loggers are named sdr_pesq.<component>
        log_record["component"] = record.name.rpartition(".")[2]
        log_record["module"] = record.module
        log_record["function"] = record.funcName
        log_record["line"] = record.lineno

        if record.process:
            log_record["process"] = record.process
        # eval workers run in anyio threads; the thread id tells rows apart
        if record.thread:
            log_record["thread"] = record.thread
            log_record["thread_name"] = record.threadName


def setup_logger(
    log_level: str = "INFO",
    log_file_path: str = "logs/sdr_pesq.log",
    log_max_bytes: int = 10 * 1024 * 1024,
    log_backup_count: int = 5,
    enable_console: bool = True,
    enable_file: bool = True,
) -> logging.Logger:
    """
    Configure the ``sdr_pesq`` logger and return it.

    Existing handlers are dropped first, so calling this twice (for example after
    a ``--config`` override changes the level) never duplicates output.

    Args:
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL.
        log_file_path: Target of the rotating file handler.
        log_max_bytes: Size at which the file rotates.
        log_backup_count: Rotated files kept on disk.
        enable_console: Attach a stderr handler.
        enable_file: Attach the rotating file handler.

    Returns:
        The configured project logger.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    logger.propagate = False

    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    formatter = SdrPesqJsonFormatter(
        fmt="%(timestamp)s %(level)s %(name)s %(module)s %(funcName)s:%(lineno)d %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    if enable_console:
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if enable_file:
        log_file = Path(log_file_path)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=log_max_bytes,
            backupCount=log_backup_count,
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(name: str | None = None) -> logging.Logger:
    """Return ``sdr_pesq.<name>``, or the project logger itself when name is empty."""
    if name:
        return logging.getLogger(f"{LOGGER_NAME}.{name}")
    return logging.getLogger(LOGGER_NAME)


def setup_third_party_logging(level: str = "WARNING") -> None:
    """Cap the level of the numeric and I/O libraries the toolkit drives."""
    log_level = getattr(logging, level.upper(), logging.WARNING)
    for logger_name in THIRD_PARTY_LOGGERS:
        logging.getLogger(logger_name).setLevel(log_level)
