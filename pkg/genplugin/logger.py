import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path

LOG_DIR = Path(os.environ.get("GENPLUGIN_LOG_DIR", "logs"))

# Formatting
log_format = logging.Formatter(
    "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)

_PACKAGE_LOGGERS: list[logging.Logger] = []


def get_logger(name, log_file=None, level=logging.INFO):
    """Named package logger; console always, rotating file under LOG_DIR when log_file is given."""

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # already configured
    if logger.handlers:
        return logger

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(log_format)
    logger.addHandler(console_handler)

    # File handler
    if log_file:
        LOG_DIR.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            LOG_DIR / log_file,
            maxBytes=10*1024*1024, # 10MB
            backupCount=5
        )
        file_handler.setFormatter(log_format)
        logger.addHandler(file_handler)

    _PACKAGE_LOGGERS.append(logger)
    return logger


def attach_experiment_log(log_dir: Path) -> RotatingFileHandler:
    """Mirror every package logger into <experiment>/logs/genplugin.log."""
    log_dir.mkdir(parents=True, exist_ok=True)
    handler = RotatingFileHandler(
        log_dir / "genplugin.log",
        maxBytes=10*1024*1024,
        backupCount=5
    )
    handler.setFormatter(log_format)
    for logger in _PACKAGE_LOGGERS:
        logger.addHandler(handler)
    return handler


def detach_experiment_log(handler: RotatingFileHandler) -> None:
    for logger in _PACKAGE_LOGGERS:
        if handler in logger.handlers:
            logger.removeHandler(handler)
    handler.close()


# Pre-defined loggers
data_logger = get_logger("genplugin.data")
model_logger = get_logger("genplugin.model")
train_logger = get_logger("genplugin.train")
retrieval_logger = get_logger("genplugin.retrieval")
eval_logger = get_logger("genplugin.eval")
cli_logger = get_logger("genplugin.cli")
