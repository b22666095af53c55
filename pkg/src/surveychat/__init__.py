"""surveychat: a self-hostable middleware daemon that embeds live, loggable,
experimentally manipulable LLM chat into web survey pages."""

from .backend import LLMRequest, LLMResponse, LiveBackend, MockBackend, mock_complete
from .config import (
    StudyConfig,
    SecretsBundle,
    bundled_study_path,
    load_secrets,
    load_study_config,
    resolve_condition,
    validate_config,
)
from .prompts import apply_phase, compose_system_prompt
from .service import create_app
from .session import Session, SessionManager
from .store import TranscriptStore

__version__ = "0.1.0"

__all__ = [
    "LLMRequest",
    "LLMResponse",
    "LiveBackend",
    "MockBackend",
    "SecretsBundle",
    "Session",
    "SessionManager",
    "StudyConfig",
    "TranscriptStore",
    "apply_phase",
    "bundled_study_path",
    "compose_system_prompt",
    "create_app",
    "load_secrets",
    "load_study_config",
    "mock_complete",
    "resolve_condition",
    "validate_config",
]
