"""Exception hierarchy shared by the engine, the server, and the wire protocol.

Every error carries a stable ``code`` string that doubles as the wire error
code in server responses.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine-raised errors."""

    code = "internal"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


# -- storage ----------------------------------------------------------------


class DuplicateTableError(EngineError):
    code = "duplicate_table"


class InvalidSchemaError(EngineError):
    code = "invalid_schema"


class UnknownTableError(EngineError):
    code = "unknown_table"


class SchemaMismatchError(EngineError):
    """Record does not match the table schema; ``field`` names the offender."""

    code = "schema_mismatch"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class OutOfOrderError(EngineError):
    code = "out_of_order"


class ResourceExhaustedError(EngineError):
    code = "resource_exhausted"


# -- SQL frontend -----------------------------------------------------------


class LexError(EngineError):
    """Illegal character in the input; ``offset`` is a byte offset."""

    code = "parse_error"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class QuerySyntaxError(EngineError):
    """Grammar violation; carries the offset and the expected token set."""

    code = "parse_error"

    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        detail = f"{message} at offset {offset}"
        if expected:
            detail += f" (expected {', '.join(expected)})"
        super().__init__(detail)
        self.offset = offset
        self.expected = expected


class UnsupportedFeatureError(EngineError):
    """Recognized SQL that is outside the supported subset (e.g. JOIN)."""

    code = "parse_error"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


# -- planner ----------------------------------------------------------------


class PlanError(EngineError):
    code = "plan_error"


class UnknownColumnError(PlanError):
    code = "plan_error"


class UnknownFunctionError(PlanError):
    code = "plan_error"


class TypeCheckError(PlanError):
    code = "plan_error"


class FingerprintMismatchError(EngineError):
    code = "fingerprint_mismatch"


class StalePlanError(EngineError):
    code = "stale_plan"


# -- ML registry ------------------------------------------------------------


class DuplicateFunctionError(EngineError):
    code = "duplicate_function"


class NonFiniteWeightError(EngineError):
    code = "non_finite_weight"


# -- serving ----------------------------------------------------------------


class UnknownDeploymentError(EngineError):
    code = "unknown_deployment"


class DuplicateDeploymentError(EngineError):
    code = "duplicate_deployment"


class AdmissionTimeoutError(EngineError):
    code = "admission_timeout"


class InvalidConfigError(EngineError):
    code = "invalid_config"


class MalformedMessageError(EngineError):
    code = "malformed"
