"""Centralized error handling and exit code definitions for wmbench."""

import logging
from typing import Callable, Dict, Type, Union

logger = logging.getLogger(__name__)


class ExitCodes:  # pylint: disable=too-few-public-methods
    """Process exit codes returned by the CLI."""

    OK = 0
    FAILURE = 1
    USAGE = 2
    CONFIG = 3
    DATA = 4
    CAPACITY = 5
    MODEL = 6
    INGESTION = 7
    DEGENERATE = 8
    INTERRUPTED = 130


# Exit code to message mapping
EXIT_MESSAGES: Dict[int, str] = {
    ExitCodes.OK: "Success",
    ExitCodes.FAILURE: "Unexpected failure",
    ExitCodes.USAGE: "Invalid usage",
    ExitCodes.CONFIG: "Invalid configuration",
    ExitCodes.DATA: "Invalid input data",
    ExitCodes.CAPACITY: "Image cannot host the watermark",
    ExitCodes.MODEL: "Model contract violated",
    ExitCodes.INGESTION: "External ingestion failed",
    ExitCodes.DEGENERATE: "Degenerate data",
    ExitCodes.INTERRUPTED: "Interrupted",
}


class WmBenchError(Exception):
    """Base exception class for wmbench errors."""

    exit_code: int = ExitCodes.FAILURE

    def __init__(self, message: str, exit_code: int | None = None):
        """
        Initialize wmbench error.

        Args:
            message: Error message.
            exit_code: Override for the class-level exit code.
        """
        super().__init__(message)
        if exit_code is not None:
            self.exit_code = exit_code


class ContractViolation(WmBenchError, ValueError):
    """Raised when an operation is called outside its preconditions."""

    exit_code = ExitCodes.DATA


class CapacityError(WmBenchError):
    """Raised when an image is too small to host a message."""

    exit_code = ExitCodes.CAPACITY


class DatasetError(WmBenchError):
    """Raised when a dataset manifest is malformed or references missing files."""

    exit_code = ExitCodes.DATA


class ConfigError(WmBenchError):
    """Raised when a run configuration is invalid."""

    exit_code = ExitCodes.CONFIG


class ModelError(WmBenchError):
    """Raised when a differentiable model breaks its gradient contract."""

    exit_code = ExitCodes.MODEL


class IngestionError(WmBenchError):
    """Raised when externally produced images or metrics cannot be registered."""

    exit_code = ExitCodes.INGESTION


class DegenerateDataError(WmBenchError):
    """Raised when training data cannot be separated."""

    exit_code = ExitCodes.DEGENERATE


class DegenerateCorpusError(WmBenchError):
    """Raised when a quality corpus has no spread to normalize against."""

    exit_code = ExitCodes.DEGENERATE


# Exception to exit code mapping for errors raised outside the hierarchy
EXCEPTION_TO_EXIT_CODE: Dict[Type[BaseException], Union[int, Callable[[BaseException], int]]] = {
    WmBenchError: lambda e: getattr(e, "exit_code", ExitCodes.FAILURE),
    KeyboardInterrupt: ExitCodes.INTERRUPTED,
    FileNotFoundError: ExitCodes.DATA,
    ValueError: ExitCodes.DATA,
    OSError: ExitCodes.FAILURE,
}


def get_exit_message(exit_code: int) -> str:
    """
    Get a human-readable message for an exit code.

    Args:
        exit_code: The process exit code.

    Returns:
        Message string.
    """
    return EXIT_MESSAGES.get(exit_code, "Unknown error")


def get_exit_code_for_exception(exception: BaseException) -> int:
    """
    Map an exception to the process exit code the CLI should return.

    Args:
        exception: The exception that occurred.

    Returns:
        Exit code.
    """
    if isinstance(exception, WmBenchError):
        return exception.exit_code

    for exc_type in type(exception).__mro__:
        code_or_func = EXCEPTION_TO_EXIT_CODE.get(exc_type)
        if code_or_func is None:
            continue
        if callable(code_or_func):
            return code_or_func(exception)  # pylint: disable=not-callable
        return code_or_func

    logger.warning("Unknown exception type: %s", type(exception).__name__)
    return ExitCodes.FAILURE
