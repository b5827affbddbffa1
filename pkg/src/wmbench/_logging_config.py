"""Logging configuration for wmbench."""

import json
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict, MutableMapping, Optional, Tuple, Union

LOG_LEVEL_ENV = "WMBENCH_LOG_LEVEL"
LOG_JSON_ENV = "WMBENCH_LOG_JSON"


class JSONFormatter(logging.Formatter):
    """Custom JSON formatter for structured logging."""

    def format(self, record: logging.LogRecord) -> str:
        """
        Format log record as JSON.

        Args:
            record: The log record to format.

        Returns:
            JSON-formatted log string.
        """
        log_entry: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        if getattr(record, "run_id", None):
            log_entry["run_id"] = record.run_id

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        if hasattr(record, "extra_fields"):
            log_entry.update(record.extra_fields)

        return json.dumps(log_entry, ensure_ascii=False, default=str)


def _env_flag(name: str) -> bool:
    return os.getenv(name, "false").lower() in ("true", "1", "yes")


def setup_logging(
    log_level: Optional[str] = None, json_format: Optional[bool] = None
) -> None:
    """
    Configure logging for wmbench.

    Args:
        log_level: Override log level (DEBUG, INFO, WARNING, ERROR).
                  If None, uses WMBENCH_LOG_LEVEL env var or defaults to INFO.
        json_format: Force JSON output. If None, uses WMBENCH_LOG_JSON.
    """
    if log_level is None:
        log_level = get_log_level_from_env()
    log_level = log_level.upper()

    numeric_level = getattr(logging, log_level, None)
    if not isinstance(numeric_level, int):
        print(f"Invalid log level: {log_level}, using INFO", file=sys.stderr)
        numeric_level = logging.INFO

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setLevel(numeric_level)

    use_json = _env_flag(LOG_JSON_ENV) if json_format is None else json_format

    if use_json:
        formatter: Union[JSONFormatter, logging.Formatter] = JSONFormatter()
    else:
        formatter = logging.Formatter(
            fmt="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )

    stderr_handler.setFormatter(formatter)
    root_logger.addHandler(stderr_handler)

    logger = logging.getLogger(__name__)
    logger.debug("Logging configured: level=%s, json=%s", log_level, use_json)


def get_run_logger(
    name: str, run_id: Optional[str] = None
) -> logging.LoggerAdapter[logging.Logger]:
    """
    Get a logger adapter that stamps the run id on every record.

    Args:
        name: Logger name.
        run_id: Run identifier for correlation.

    Returns:
        LoggerAdapter with run id context.
    """
    logger = logging.getLogger(name)

    class RunIDAdapter(logging.LoggerAdapter[logging.Logger]):  # pylint: disable=too-few-public-methods
        """Logger adapter that adds the run id to log records."""

        def process(
            self, msg: Any, kwargs: MutableMapping[str, Any]
        ) -> Tuple[Any, MutableMapping[str, Any]]:
            """Add run id to log record."""
            extra = kwargs.get("extra", {})
            if self.extra and self.extra.get("run_id"):
                extra["run_id"] = self.extra["run_id"]
            kwargs["extra"] = extra
            return msg, kwargs

    return RunIDAdapter(logger, {"run_id": run_id})


def _emit(logger: logging.Logger, level: int, message: str, fields: Dict[str, Any]) -> None:
    record = logger.makeRecord(logger.name, level, "", 0, message, (), None)
    record.extra_fields = fields
    logger.handle(record)


def log_stage_start(
    logger: logging.Logger, stage: str, run_id: Optional[str] = None, **fields: Any
) -> None:
    """
    Log the start of a pipeline stage.

    Args:
        logger: Logger instance.
        stage: Stage name.
        run_id: Run identifier for correlation.
        **fields: Extra structured fields (counts, inputs).
    """
    extra_fields: Dict[str, Any] = {"stage": stage, "stage_event": "start", "run_id": run_id}
    extra_fields.update(fields)
    _emit(logger, logging.INFO, f"Stage started: {stage}", extra_fields)


def log_stage_end(
    logger: logging.Logger,
    stage: str,
    success: bool,
    duration_s: float,
    run_id: Optional[str] = None,
    **fields: Any,
) -> None:
    """
    Log the end of a pipeline stage.

    Args:
        logger: Logger instance.
        stage: Stage name.
        success: Whether the stage completed.
        duration_s: Wall-clock duration in seconds.
        run_id: Run identifier for correlation.
        **fields: Extra structured fields.
    """
    extra_fields: Dict[str, Any] = {
        "stage": stage,
        "stage_event": "end",
        "stage_success": success,
        "duration_s": round(duration_s, 3),
        "run_id": run_id,
    }
    extra_fields.update(fields)
    level = logging.INFO if success else logging.ERROR
    message = f"Stage finished: {stage} - {'success' if success else 'error'}"
    _emit(logger, level, message, extra_fields)


def configure_third_party_loggers() -> None:
    """Configure logging for third-party libraries."""
    # PIL logs every chunk it parses at DEBUG
    logging.getLogger("PIL").setLevel(logging.WARNING)


def get_log_level_from_env() -> str:
    """
    Get log level from environment variable.

    Returns:
        Log level string (DEBUG, INFO, WARNING, ERROR).
    """
    return os.getenv(LOG_LEVEL_ENV, "INFO").upper()


def is_debug_enabled() -> bool:
    """
    Check if debug logging is enabled.

    Returns:
        True if debug logging is enabled.
    """
    return get_log_level_from_env() == "DEBUG"
