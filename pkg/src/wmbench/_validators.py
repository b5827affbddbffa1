"""Input validation utilities for wmbench."""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import jsonschema

from ._errors import ConfigError, ContractViolation


@dataclass
class ValidationError:
    """Represents a validation error with context."""

    field: str
    message: str
    value: Optional[Any] = None


class ValidationException(ConfigError):
    """Exception raised when validation fails."""

    def __init__(self, errors: List[ValidationError]):
        self.errors = errors
        messages = [f"{error.field}: {error.message}" for error in errors]
        super().__init__("; ".join(messages))


def validate_with_json_schema(data: Any, schema: Dict[str, Any]) -> None:
    """
    Validate data against a JSON schema, reporting every violation.

    Args:
        data: Data to validate
        schema: JSON schema to validate against

    Raises:
        ValidationException: If validation fails
    """
    try:
        validator = jsonschema.Draft7Validator(schema)
    except jsonschema.SchemaError as e:
        raise ValidationException(
            [ValidationError("schema", f"Invalid schema: {e.message}")]
        ) from e

    errors = [
        ValidationError(
            ".".join(str(p) for p in error.path) if error.path else "root",
            error.message,
        )
        for error in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.path)))
    ]
    if errors:
        raise ValidationException(errors)


def require_open_unit(name: str, value: float) -> None:
    """
    Require a value strictly inside (0, 1).

    Raises:
        ContractViolation: If the value is outside the open unit interval.
    """
    if not (isinstance(value, (int, float)) and 0.0 < value < 1.0):
        raise ContractViolation(f"{name} must lie in (0, 1), got {value!r}")


def require_positive_int(name: str, value: int, minimum: int = 1) -> None:
    """
    Require an integer no smaller than ``minimum``.

    Raises:
        ContractViolation: If the value is not an integer or is too small.
    """
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ContractViolation(f"{name} must be an integer >= {minimum}, got {value!r}")


def require_finite(name: str, value: float) -> None:
    """Require a finite real."""
    if not math.isfinite(value):
        raise ContractViolation(f"{name} must be finite, got {value!r}")


def require_same_shape(a: Any, b: Any) -> None:
    """
    Require two array-likes (or image buffers) to share a shape.

    Raises:
        ContractViolation: If the shapes differ.
    """
    shape_a = getattr(a, "shape", None)
    shape_b = getattr(b, "shape", None)
    if shape_a != shape_b:
        raise ContractViolation(f"Shape mismatch: {shape_a} vs {shape_b}")
