import logging
from logging.config import dictConfig
from typing import Sequence

# third-party loggers that are too chatty at INFO during long replication runs
QUIET_LOGGERS = ("uvicorn.access", "joblib")

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"
# loky workers log from their own process
WORKER_LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s pid=%(process)d] %(message)s"


def configure_logging(log_level: str = "INFO", quiet: Sequence[str] = QUIET_LOGGERS, workers: bool = False) -> None:
    """Console logging to stderr; stdout stays free for the CLI step lines."""
    dictConfig(
        {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "default": {"format": WORKER_LOG_FORMAT if workers else LOG_FORMAT},
            },
            "handlers": {
                "console": {
                    "class": "logging.StreamHandler",
                    "formatter": "default",
                    "level": log_level,
                    "stream": "ext://sys.stderr",
                }
            },
            "loggers": {
                "app": {"level": log_level, "propagate": True},
            },
            "root": {
                "handlers": ["console"],
                "level": log_level,
            },
        }
    )

    for name in quiet:
        logging.getLogger(name).setLevel(logging.WARNING)
