"""Tests for exit codes, logging setup and validators."""

import json
import logging
import math
import sys

import numpy as np
import pytest

from wmbench._errors import (
    CapacityError,
    ConfigError,
    ContractViolation,
    ExitCodes,
    IngestionError,
    ModelError,
    WmBenchError,
    get_exit_code_for_exception,
    get_exit_message,
)
from wmbench._logging_config import (
    JSONFormatter,
    configure_third_party_loggers,
    get_run_logger,
    is_debug_enabled,
    log_stage_end,
    log_stage_start,
    setup_logging,
)
from wmbench._validators import (
    ValidationException,
    require_finite,
    require_open_unit,
    require_positive_int,
    require_same_shape,
    validate_with_json_schema,
)


@pytest.fixture
def restore_root_logger():
    """Put the root logger back the way it was."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield root
    root.handlers[:] = handlers
    root.setLevel(level)


class TestExitCodes:
    """Test exception to exit code mapping."""

    @pytest.mark.parametrize(
        "error,code",
        [
            (ConfigError("x"), ExitCodes.CONFIG),
            (ContractViolation("x"), ExitCodes.DATA),
            (CapacityError("x"), ExitCodes.CAPACITY),
            (ModelError("x"), ExitCodes.MODEL),
            (IngestionError("x"), ExitCodes.INGESTION),
            (FileNotFoundError("x"), ExitCodes.DATA),
            (PermissionError("x"), ExitCodes.FAILURE),
            (ValueError("x"), ExitCodes.DATA),
            (KeyboardInterrupt(), ExitCodes.INTERRUPTED),
            (RuntimeError("x"), ExitCodes.FAILURE),
        ],
    )
    def test_mapping(self, error, code):
        """Test codes for each error kind."""
        assert get_exit_code_for_exception(error) == code

    def test_override(self):
        """Test a per-instance exit code."""
        assert get_exit_code_for_exception(WmBenchError("x", exit_code=ExitCodes.USAGE)) == ExitCodes.USAGE

    def test_contract_violation_is_value_error(self):
        """Test that contract violations can be caught as ValueError."""
        with pytest.raises(ValueError):
            raise ContractViolation("bad")

    def test_messages(self):
        """Test exit messages."""
        assert get_exit_message(ExitCodes.CAPACITY) == "Image cannot host the watermark"
        assert get_exit_message(99) == "Unknown error"


class TestLogging:
    """Test logging configuration."""

    def test_json_formatter(self):
        """Test structured records."""
        record = logging.LogRecord("wmbench.test", logging.INFO, __file__, 10, "Hello %s", ("world",), None)
        record.run_id = "r1"
        record.extra_fields = {"stage": "embed"}
        entry = json.loads(JSONFormatter().format(record))
        assert entry["message"] == "Hello world"
        assert entry["level"] == "INFO"
        assert entry["run_id"] == "r1"
        assert entry["stage"] == "embed"

    def test_json_formatter_exception(self):
        """Test that exceptions are included."""
        try:
            raise ModelError("boom")
        except ModelError:
            record = logging.LogRecord("x", logging.ERROR, __file__, 1, "failed", (), sys.exc_info())
        entry = json.loads(JSONFormatter().format(record))
        assert "ModelError: boom" in entry["exception"]

    def test_env_level_and_json(self, monkeypatch, restore_root_logger):
        """Test configuration from environment variables."""
        monkeypatch.setenv("WMBENCH_LOG_LEVEL", "debug")
        monkeypatch.setenv("WMBENCH_LOG_JSON", "true")
        setup_logging()
        assert restore_root_logger.level == logging.DEBUG
        assert len(restore_root_logger.handlers) == 1
        assert isinstance(restore_root_logger.handlers[0].formatter, JSONFormatter)

    def test_explicit_arguments_win(self, monkeypatch, restore_root_logger):
        """Test that arguments override the environment."""
        monkeypatch.setenv("WMBENCH_LOG_JSON", "true")
        setup_logging(log_level="WARNING", json_format=False)
        assert restore_root_logger.level == logging.WARNING
        assert not isinstance(restore_root_logger.handlers[0].formatter, JSONFormatter)

    def test_debug_flag(self, monkeypatch):
        """Test debug detection from the environment."""
        monkeypatch.setenv("WMBENCH_LOG_LEVEL", "debug")
        assert is_debug_enabled()
        monkeypatch.delenv("WMBENCH_LOG_LEVEL")
        assert not is_debug_enabled()

    def test_invalid_level(self, capsys, restore_root_logger):
        """Test fallback to INFO."""
        setup_logging(log_level="LOUD")
        assert restore_root_logger.level == logging.INFO
        assert "Invalid log level" in capsys.readouterr().err

    def test_run_logger(self, caplog):
        """Test that the run id is stamped on records."""
        with caplog.at_level(logging.INFO, logger="wmbench.test"):
            get_run_logger("wmbench.test", "run-7").info("embedding %d images", 3)
        assert caplog.records[-1].run_id == "run-7"
        assert caplog.records[-1].getMessage() == "embedding 3 images"

    def test_stage_events(self, caplog):
        """Test structured stage start and end records."""
        logger = logging.getLogger("wmbench.test.stages")
        with caplog.at_level(logging.INFO, logger="wmbench.test.stages"):
            log_stage_start(logger, "attack", run_id="r")
            log_stage_end(logger, "attack", False, 1.23456, run_id="r", outputs=4)
        start, end = caplog.records[-2:]
        assert start.extra_fields == {"stage": "attack", "stage_event": "start", "run_id": "r"}
        assert end.levelno == logging.ERROR
        assert end.extra_fields["duration_s"] == 1.235
        assert end.extra_fields["outputs"] == 4
        assert end.getMessage() == "Stage finished: attack - error"

    def test_third_party_loggers(self):
        """Test that PIL's chunk-level debug output is silenced."""
        pil = logging.getLogger("PIL")
        level = pil.level
        try:
            pil.setLevel(logging.DEBUG)
            configure_third_party_loggers()
            assert pil.level == logging.WARNING
        finally:
            pil.setLevel(level)


class TestValidators:
    """Test shared validation helpers."""

    def test_schema_reports_every_error(self):
        """Test that all violations are listed."""
        schema = {
            "type": "object",
            "properties": {"a": {"type": "integer"}, "b": {"type": "string"}},
            "additionalProperties": False,
        }
        with pytest.raises(ValidationException) as exc_info:
            validate_with_json_schema({"a": "x", "b": 1}, schema)
        assert [e.field for e in exc_info.value.errors] == ["a", "b"]
        assert "; " in str(exc_info.value)
        assert isinstance(exc_info.value, ConfigError)

    def test_schema_accepts_valid(self):
        """Test valid data."""
        validate_with_json_schema({"a": 1}, {"type": "object", "properties": {"a": {"type": "integer"}}})

    @pytest.mark.parametrize("value", [0.0, 1.0, -0.5, math.nan, "0.5"])
    def test_open_unit(self, value):
        """Test values outside (0, 1)."""
        with pytest.raises(ContractViolation):
            require_open_unit("alpha", value)

    @pytest.mark.parametrize("value", [0, True, 2.0, -3])
    def test_positive_int(self, value):
        """Test rejected integers."""
        with pytest.raises(ContractViolation):
            require_positive_int("count", value)

    def test_accepted_values(self):
        """Test values the helpers accept."""
        require_open_unit("alpha", 0.05)
        require_positive_int("count", 2, minimum=2)
        require_finite("x", -1e300)
        require_same_shape(np.zeros((2, 3)), np.ones((2, 3)))

    def test_finite_and_shape(self):
        """Test infinities and shape mismatches."""
        with pytest.raises(ContractViolation, match="finite"):
            require_finite("x", math.inf)
        with pytest.raises(ContractViolation, match="Shape mismatch"):
            require_same_shape(np.zeros((2, 3)), np.zeros((3, 2)))
