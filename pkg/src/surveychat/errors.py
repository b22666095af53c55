"""Exception hierarchy shared across the daemon."""

from __future__ import annotations


class SurveyChatError(Exception):
    """Base class for all errors raised by this package.

    ``code`` is the stable machine-readable identifier used in HTTP error
    bodies and CLI output.
    """

    code = "internal_error"


# --- configuration ----------------------------------------------------------

class ConfigError(SurveyChatError):
    code = "config_error"


class FileMissing(ConfigError):
    code = "file_missing"


class MalformedJson(ConfigError):
    """JSON that failed to parse; carries line/column of the failure."""

    code = "malformed_json"

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class SchemaViolation(ConfigError):
    """Config content that parsed but breaks the schema.

    ``pointer`` is a JSON pointer to the offending element. When raised for a
    batch of violations, ``violations`` carries them all and ``pointer``
    refers to the first.
    """

    code = "schema_violation"

    def __init__(self, pointer: str, message: str, violations=None):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer
        self.violations = list(violations) if violations is not None else []


class MissingKey(ConfigError):
    code = "missing_key"

    def __init__(self, key: str):
        super().__init__(f"missing required key: {key}")
        self.key = key


# --- study/session lookups --------------------------------------------------

class UnknownCondition(SurveyChatError):
    code = "unknown_condition"


class UnknownLayer(SurveyChatError):
    code = "unknown_layer"


class UnknownPhase(SurveyChatError):
    code = "unknown_phase"


class ConditionMismatch(SurveyChatError):
    """Resume attempted with a different condition than the session stores."""

    code = "condition_mismatch"


# --- message handling -------------------------------------------------------

class InvalidMessage(SurveyChatError):
    """User message rejected before any turn is logged."""

    code = "invalid_message"


class MessageTooLarge(InvalidMessage):
    code = "message_too_large"


class SessionTurnLimitExceeded(SurveyChatError):
    code = "turn_limit_exceeded"


# --- backend ----------------------------------------------------------------

class BackendError(SurveyChatError):
    code = "backend_error"


class BackendUnavailable(BackendError):
    """Retries exhausted; the user turn stays logged so a retry is safe."""

    code = "backend_unavailable"


class BackendRejected(BackendError):
    """Non-retryable provider response (4xx other than 429)."""

    code = "backend_rejected"

    def __init__(self, status_code: int, message: str = ""):
        super().__init__(message or f"provider rejected request with HTTP {status_code}")
        self.status_code = status_code


class MalformedProviderResponse(BackendError):
    code = "malformed_provider_response"


# --- storage ----------------------------------------------------------------

class StorageFailure(SurveyChatError):
    code = "storage_failure"


class UnknownSession(StorageFailure):
    code = "unknown_session"


# --- simulator --------------------------------------------------------------

class TargetUnreachable(SurveyChatError):
    code = "target_unreachable"


class ScriptInvalid(SurveyChatError):
    code = "script_invalid"


class DbUnreadable(SurveyChatError):
    code = "db_unreadable"
