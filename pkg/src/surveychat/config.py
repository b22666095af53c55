"""Study definitions and server secrets.

A study is described by a single JSON file a researcher edits outside the
code: experimental conditions, system-prompt layers, phase directives that
flip layers on page advances, backend settings, and message limits. The
schema is strict (unknown keys are rejected) so typos in hand-edited files
surface at load time instead of silently doing nothing.
"""

from __future__ import annotations

import json
import logging
import os
import re
import stat
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import (
    FileMissing,
    MalformedJson,
    MissingKey,
    SchemaViolation,
    UnknownCondition,
)

logger = logging.getLogger("surveychat.config")

SCHEMA_VERSION = 1

ID_PATTERN = re.compile(r"^[A-Za-z0-9_-]{1,64}$")
PARTICIPANT_ID_PATTERN = re.compile(r"^[A-Za-z0-9_#-]{1,64}$")

SELF_REFERENCE_MODES = ("first_person", "third_person", "none")
BACKEND_KINDS = ("openai_compatible", "mock")

API_KEY_ENV = "SURVEYCHAT_API_KEY"
ADMIN_TOKEN_ENV = "SURVEYCHAT_ADMIN_TOKEN"


def json_pointer(*parts: Any) -> str:
    """Build an RFC 6901 pointer from path segments."""
    out = []
    for part in parts:
        text = str(part).replace("~", "~0").replace("/", "~1")
        out.append(text)
    return "/" + "/".join(out) if out else ""


@dataclass(frozen=True)
class Violation:
    pointer: str
    message: str


@dataclass(frozen=True)
class DisplaySpec:
    icon_ref: str | None = None
    agent_name: str | None = None
    self_reference_mode: str = "none"


@dataclass(frozen=True)
class ConditionSpec:
    condition_id: str
    base_prompt_layers: tuple[str, ...]
    display: DisplaySpec = field(default_factory=DisplaySpec)


@dataclass(frozen=True)
class PromptLayer:
    layer_id: str
    text: str
    order_rank: int


@dataclass(frozen=True)
class PhaseDirective:
    phase_id: str
    activate: frozenset[str] = frozenset()
    deactivate: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_s: float = 0.5


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "mock"
    endpoint_url: str | None = None
    model_name: str = "mock-model"
    temperature: float = 0.7
    max_response_tokens: int = 512
    request_timeout_s: float = 30.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)


@dataclass(frozen=True)
class MessageLimits:
    max_user_message_bytes: int = 8192
    max_turns_per_session: int = 100
    max_context_messages: int = 60


@dataclass(frozen=True)
class StudyConfig:
    study_id: str
    conditions: dict[str, ConditionSpec]
    layers: dict[str, PromptLayer]
    phases: dict[str, PhaseDirective]
    backend: BackendSettings = field(default_factory=BackendSettings)
    limits: MessageLimits = field(default_factory=MessageLimits)

    def to_json_dict(self) -> dict[str, Any]:
        """Serialize back to the on-disk JSON shape (defaults included)."""
        return {
            "schema_version": SCHEMA_VERSION,
            "study_id": self.study_id,
            "conditions": {
                cid: {
                    "base_prompt_layers": list(spec.base_prompt_layers),
                    "display": {
                        "icon_ref": spec.display.icon_ref,
                        "agent_name": spec.display.agent_name,
                        "self_reference_mode": spec.display.self_reference_mode,
                    },
                }
                for cid, spec in self.conditions.items()
            },
            "layers": {
                lid: {"text": layer.text, "order_rank": layer.order_rank}
                for lid, layer in self.layers.items()
            },
            "phases": {
                pid: {
                    "activate": sorted(phase.activate),
                    "deactivate": sorted(phase.deactivate),
                }
                for pid, phase in self.phases.items()
            },
            "backend": {
                "kind": self.backend.kind,
                "endpoint_url": self.backend.endpoint_url,
                "model_name": self.backend.model_name,
                "temperature": self.backend.temperature,
                "max_response_tokens": self.backend.max_response_tokens,
                "request_timeout_s": self.backend.request_timeout_s,
                "retry": {
                    "max_attempts": self.backend.retry.max_attempts,
                    "backoff_base_s": self.backend.retry.backoff_base_s,
                },
            },
            "limits": {
                "max_user_message_bytes": self.limits.max_user_message_bytes,
                "max_turns_per_session": self.limits.max_turns_per_session,
                "max_context_messages": self.limits.max_context_messages,
            },
        }


@dataclass(frozen=True, repr=False)
class SecretsBundle:
    api_key: str
    admin_token: str

    def __repr__(self) -> str:  # never leak values through repr/str
        return "SecretsBundle(api_key=<redacted>, admin_token=<redacted>)"

    __str__ = __repr__


# --- structural parsing -----------------------------------------------------
#
# Parsing is strict about shape (types, required/unknown keys) and raises
# SchemaViolation immediately. Cross-reference and range checks live in
# validate_config so they can also run on programmatically built configs.

def _require_object(value: Any, pointer: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaViolation(pointer, "expected a JSON object")
    return value


def _reject_unknown(obj: dict, allowed: set[str], pointer: str) -> None:
    extra = set(obj) - allowed
    if extra:
        key = sorted(extra)[0]
        escaped = key.replace("~", "~0").replace("/", "~1")
        raise SchemaViolation(f"{pointer}/{escaped}", f"unknown key {key!r}")


def _get_str(obj: dict, key: str, pointer: str, *, required: bool = True,
             default: str | None = None, allow_none: bool = False) -> str | None:
    if key not in obj:
        if required:
            raise SchemaViolation(pointer + "/" + key, "required key is missing")
        return default
    value = obj[key]
    if value is None and allow_none:
        return None
    if not isinstance(value, str):
        raise SchemaViolation(pointer + "/" + key, "expected a string")
    return value


def _get_number(obj: dict, key: str, pointer: str, default: float) -> float:
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(pointer + "/" + key, "expected a number")
    return float(value)


def _get_int(obj: dict, key: str, pointer: str, default: int) -> int:
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaViolation(pointer + "/" + key, "expected an integer")
    return value


def _get_str_list(obj: dict, key: str, pointer: str) -> list[str]:
    value = obj.get(key, [])
    if not isinstance(value, list):
        raise SchemaViolation(pointer + "/" + key, "expected a list of strings")
    for i, item in enumerate(value):
        if not isinstance(item, str):
            raise SchemaViolation(f"{pointer}/{key}/{i}", "expected a string")
    return value


def _parse_display(obj: Any, pointer: str) -> DisplaySpec:
    data = _require_object(obj, pointer)
    _reject_unknown(data, {"icon_ref", "agent_name", "self_reference_mode"}, pointer)
    mode = _get_str(data, "self_reference_mode", pointer, required=False, default="none")
    if mode not in SELF_REFERENCE_MODES:
        raise SchemaViolation(
            pointer + "/self_reference_mode",
            f"expected one of {', '.join(SELF_REFERENCE_MODES)}",
        )
    return DisplaySpec(
        icon_ref=_get_str(data, "icon_ref", pointer, required=False, allow_none=True),
        agent_name=_get_str(data, "agent_name", pointer, required=False, allow_none=True),
        self_reference_mode=mode,
    )


def _parse_condition(cid: str, obj: Any, pointer: str) -> ConditionSpec:
    data = _require_object(obj, pointer)
    _reject_unknown(data, {"base_prompt_layers", "display"}, pointer)
    layers = _get_str_list(data, "base_prompt_layers", pointer)
    display = _parse_display(data["display"], pointer + "/display") if "display" in data else DisplaySpec()
    return ConditionSpec(condition_id=cid, base_prompt_layers=tuple(layers), display=display)


def _parse_layer(lid: str, obj: Any, pointer: str) -> PromptLayer:
    data = _require_object(obj, pointer)
    _reject_unknown(data, {"text", "order_rank"}, pointer)
    text = _get_str(data, "text", pointer)
    rank = data.get("order_rank")
    if isinstance(rank, bool) or not isinstance(rank, int):
        raise SchemaViolation(pointer + "/order_rank", "expected an integer")
    return PromptLayer(layer_id=lid, text=text, order_rank=rank)


def _parse_phase(pid: str, obj: Any, pointer: str) -> PhaseDirective:
    data = _require_object(obj, pointer)
    _reject_unknown(data, {"activate", "deactivate"}, pointer)
    return PhaseDirective(
        phase_id=pid,
        activate=frozenset(_get_str_list(data, "activate", pointer)),
        deactivate=frozenset(_get_str_list(data, "deactivate", pointer)),
    )


def _parse_backend(obj: Any, pointer: str) -> BackendSettings:
    data = _require_object(obj, pointer)
    _reject_unknown(
        data,
        {"kind", "endpoint_url", "model_name", "temperature",
         "max_response_tokens", "request_timeout_s", "retry"},
        pointer,
    )
    kind = _get_str(data, "kind", pointer, required=False, default="mock")
    if kind not in BACKEND_KINDS:
        raise SchemaViolation(pointer + "/kind", f"expected one of {', '.join(BACKEND_KINDS)}")
    retry_data = data.get("retry", {})
    retry_pointer = pointer + "/retry"
    _require_object(retry_data, retry_pointer)
    _reject_unknown(retry_data, {"max_attempts", "backoff_base_s"}, retry_pointer)
    retry = RetryPolicy(
        max_attempts=_get_int(retry_data, "max_attempts", retry_pointer, 3),
        backoff_base_s=_get_number(retry_data, "backoff_base_s", retry_pointer, 0.5),
    )
    return BackendSettings(
        kind=kind,
        endpoint_url=_get_str(data, "endpoint_url", pointer, required=False, allow_none=True),
        model_name=_get_str(data, "model_name", pointer, required=False, default="mock-model"),
        temperature=_get_number(data, "temperature", pointer, 0.7),
        max_response_tokens=_get_int(data, "max_response_tokens", pointer, 512),
        request_timeout_s=_get_number(data, "request_timeout_s", pointer, 30.0),
        retry=retry,
    )


def _parse_limits(obj: Any, pointer: str) -> MessageLimits:
    data = _require_object(obj, pointer)
    _reject_unknown(
        data,
        {"max_user_message_bytes", "max_turns_per_session", "max_context_messages"},
        pointer,
    )
    defaults = MessageLimits()
    return MessageLimits(
        max_user_message_bytes=_get_int(data, "max_user_message_bytes", pointer,
                                        defaults.max_user_message_bytes),
        max_turns_per_session=_get_int(data, "max_turns_per_session", pointer,
                                       defaults.max_turns_per_session),
        max_context_messages=_get_int(data, "max_context_messages", pointer,
                                      defaults.max_context_messages),
    )


def parse_study_config(data: Any) -> StudyConfig:
    """Build a StudyConfig from parsed JSON, checking shape only.

    Raises SchemaViolation on the first structural problem. Semantic checks
    (references, uniqueness, ranges) are validate_config's job.
    """
    root = _require_object(data, "")
    _reject_unknown(
        root,
        {"schema_version", "study_id", "conditions", "layers", "phases", "backend", "limits"},
        "",
    )
    version = root.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaViolation("/schema_version", f"unsupported schema version {version!r}")

    study_id = _get_str(root, "study_id", "")

    conditions_data = _require_object(root.get("conditions", {}), "/conditions")
    conditions = {
        cid: _parse_condition(cid, spec, json_pointer("conditions", cid))
        for cid, spec in conditions_data.items()
    }

    layers_data = _require_object(root.get("layers", {}), "/layers")
    layers = {
        lid: _parse_layer(lid, spec, json_pointer("layers", lid))
        for lid, spec in layers_data.items()
    }

    phases_data = _require_object(root.get("phases", {}), "/phases")
    phases = {
        pid: _parse_phase(pid, spec, json_pointer("phases", pid))
        for pid, spec in phases_data.items()
    }

    backend = _parse_backend(root["backend"], "/backend") if "backend" in root else BackendSettings()
    limits = _parse_limits(root["limits"], "/limits") if "limits" in root else MessageLimits()

    return StudyConfig(
        study_id=study_id,
        conditions=conditions,
        layers=layers,
        phases=phases,
        backend=backend,
        limits=limits,
    )


# --- semantic validation ----------------------------------------------------

def validate_config(config: StudyConfig) -> list[Violation]:
    """Check every config invariant; returns violations instead of raising."""
    violations: list[Violation] = []

    if not ID_PATTERN.match(config.study_id or ""):
        violations.append(Violation("/study_id", "must match [A-Za-z0-9_-]{1,64}"))

    if not config.conditions:
        violations.append(Violation("/conditions", "at least one condition is required"))

    for cid, spec in config.conditions.items():
        pointer = json_pointer("conditions", cid)
        if not ID_PATTERN.match(cid):
            violations.append(Violation(pointer, "condition id must match [A-Za-z0-9_-]{1,64}"))
        if not spec.base_prompt_layers:
            violations.append(Violation(pointer + "/base_prompt_layers",
                                        "must name at least one layer"))
        for i, lid in enumerate(spec.base_prompt_layers):
            if lid not in config.layers:
                violations.append(Violation(f"{pointer}/base_prompt_layers/{i}",
                                            f"references undefined layer {lid!r}"))
        icon = spec.display.icon_ref
        if icon is not None and not icon.startswith("/static/"):
            violations.append(Violation(pointer + "/display/icon_ref",
                                        "must be a served asset path under /static/"))

    for lid, layer in config.layers.items():
        pointer = json_pointer("layers", lid)
        if not ID_PATTERN.match(lid):
            violations.append(Violation(pointer, "layer id must match [A-Za-z0-9_-]{1,64}"))
        if not layer.text:
            violations.append(Violation(pointer + "/text", "layer text must be non-empty"))

    by_rank: dict[int, list[str]] = {}
    for lid, layer in config.layers.items():
        by_rank.setdefault(layer.order_rank, []).append(lid)
    for rank, ids in sorted(by_rank.items()):
        if len(ids) > 1:
            violations.append(Violation(
                "/layers",
                f"order_rank {rank} is shared by layers {', '.join(sorted(ids))}",
            ))

    for pid, phase in config.phases.items():
        pointer = json_pointer("phases", pid)
        if not ID_PATTERN.match(pid):
            violations.append(Violation(pointer, "phase id must match [A-Za-z0-9_-]{1,64}"))
        for key in ("activate", "deactivate"):
            for i, lid in enumerate(sorted(getattr(phase, key))):
                if lid not in config.layers:
                    violations.append(Violation(f"{pointer}/{key}/{i}",
                                                f"references undefined layer {lid!r}"))
        overlap = phase.activate & phase.deactivate
        if overlap:
            violations.append(Violation(
                pointer,
                f"layers {', '.join(sorted(overlap))} appear in both activate and deactivate",
            ))

    backend = config.backend
    if not 0 <= backend.temperature <= 2:
        violations.append(Violation("/backend/temperature", "must be in [0, 2]"))
    if backend.max_response_tokens < 1:
        violations.append(Violation("/backend/max_response_tokens", "must be positive"))
    if backend.retry.max_attempts < 1:
        violations.append(Violation("/backend/retry/max_attempts", "must be at least 1"))
    if backend.kind == "openai_compatible" and not backend.endpoint_url:
        violations.append(Violation("/backend/endpoint_url",
                                    "required when kind is openai_compatible"))

    limits = config.limits
    for key in ("max_user_message_bytes", "max_turns_per_session", "max_context_messages"):
        if getattr(limits, key) < 1:
            violations.append(Violation(f"/limits/{key}", "must be positive"))

    return violations


def load_study_config(path: str | Path) -> StudyConfig:
    """Load, parse, and fully validate a study file."""
    path = Path(path)
    if not path.exists():
        raise FileMissing(f"study config not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedJson(exc.msg, exc.lineno, exc.colno) from exc

    config = parse_study_config(data)
    violations = validate_config(config)
    if violations:
        first = violations[0]
        raise SchemaViolation(first.pointer, first.message, violations)
    return config


def resolve_condition(config: StudyConfig, condition_id: str) -> ConditionSpec:
    """Look up the spec for the condition the survey assigned."""
    try:
        return config.conditions[condition_id]
    except KeyError:
        raise UnknownCondition(
            f"condition {condition_id!r} is not defined in study {config.study_id!r}"
        ) from None


# --- secrets ----------------------------------------------------------------

def load_secrets(path: str | Path | None) -> SecretsBundle:
    """Load the private settings file, letting env vars override.

    SURVEYCHAT_API_KEY / SURVEYCHAT_ADMIN_TOKEN take precedence over the file;
    when both are set the file is not read at all (container deployments).
    """
    values: dict[str, str] = {}
    env_api = os.environ.get(API_KEY_ENV)
    env_admin = os.environ.get(ADMIN_TOKEN_ENV)

    if not (env_api and env_admin):
        if path is None:
            raise FileMissing("no secrets file given and env vars are not both set")
        path = Path(path)
        if not path.exists():
            raise FileMissing(f"secrets file not found: {path}")
        _warn_if_world_readable(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedJson(exc.msg, exc.lineno, exc.colno) from exc
        if not isinstance(data, dict):
            raise SchemaViolation("", "secrets file must be a JSON object")
        extra = set(data) - {"api_key", "admin_token"}
        if extra:
            raise SchemaViolation(json_pointer(sorted(extra)[0]), "unknown key in secrets file")
        for key in ("api_key", "admin_token"):
            value = data.get(key)
            if value is not None and not isinstance(value, str):
                raise SchemaViolation(json_pointer(key), "expected a string")
            if value:
                values[key] = value

    if env_api:
        values["api_key"] = env_api
    if env_admin:
        values["admin_token"] = env_admin

    for key in ("api_key", "admin_token"):
        if not values.get(key):
            raise MissingKey(key)

    return SecretsBundle(api_key=values["api_key"], admin_token=values["admin_token"])


def _warn_if_world_readable(path: Path) -> None:
    mode = stat.S_IMODE(path.stat().st_mode)
    if mode & 0o077:
        logger.warning(
            "secrets file %s is readable by group/other (mode %o); "
            "chmod 600 is recommended", path, mode,
        )


# --- bundled fixtures -------------------------------------------------------

def bundled_study_path(name: str) -> Path:
    """Path of a study file shipped with the package (e.g. ``poem_study``)."""
    resource = resources.files("surveychat").joinpath("studies", f"{name}.json")
    return Path(str(resource))
