"""Chat-completion backends: an OpenAI-compatible HTTPS client and a
deterministic mock.

The backends are stateless; every call carries the full system prompt and
message history. The mock's reply embeds a fingerprint of the canonicalized
request, which turns any drift in context replay into a visible content
change, so tests can detect replay bugs without a live model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Protocol

import httpx

from .config import BackendSettings, SecretsBundle
from .errors import BackendRejected, BackendUnavailable, MalformedProviderResponse

logger = logging.getLogger("surveychat.backend")

FINISH_REASONS = ("stop", "length", "content_filter", "error")


@dataclass(frozen=True)
class LLMRequest:
    system_prompt: str
    messages: tuple[tuple[str, str], ...]  # (role, content), roles user/assistant
    model_name: str
    temperature: float
    max_tokens: int


@dataclass(frozen=True)
class LLMResponse:
    content: str
    finish_reason: str = "stop"
    latency_s: float = 0.0
    provider_raw_id: str | None = None


def canonical_request_bytes(request: LLMRequest) -> bytes:
    """Canonical JSON encoding: sorted keys, no insignificant whitespace, UTF-8."""
    payload = {
        "system_prompt": request.system_prompt,
        "messages": [{"role": role, "content": content} for role, content in request.messages],
        "model_name": request.model_name,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def request_fingerprint(request: LLMRequest) -> str:
    """First 8 hex digits of a stable hash over the canonical request."""
    return hashlib.sha256(canonical_request_bytes(request)).hexdigest()[:8]


def mock_complete(request: LLMRequest) -> LLMResponse:
    """Pure deterministic completion; identical requests yield identical replies."""
    last_user = ""
    for role, content in reversed(request.messages):
        if role == "user":
            last_user = content
            break
    return LLMResponse(
        content=f"MOCK[{request_fingerprint(request)}]: {last_user}",
        finish_reason="stop",
        latency_s=0.0,
        provider_raw_id=None,
    )


def _wire_body(settings: BackendSettings, request: LLMRequest) -> dict:
    messages = [{"role": "system", "content": request.system_prompt}]
    messages.extend({"role": role, "content": content} for role, content in request.messages)
    return {
        "model": request.model_name,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }


def _parse_provider_response(data: object) -> LLMResponse:
    try:
        choice = data["choices"][0]  # type: ignore[index]
        content = choice["message"]["content"]
        finish = choice.get("finish_reason") or "stop"
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedProviderResponse(f"unexpected completion shape: {exc!r}") from exc
    if not isinstance(content, str):
        raise MalformedProviderResponse("completion content is not a string")
    if finish not in FINISH_REASONS:
        finish = "stop" if content else "error"
    raw_id = data.get("id") if isinstance(data, dict) else None
    return LLMResponse(
        content=content,
        finish_reason=finish,
        provider_raw_id=raw_id if isinstance(raw_id, str) else None,
    )


def send_chat_completion(
    settings: BackendSettings,
    secrets: SecretsBundle,
    request: LLMRequest,
    *,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> LLMResponse:
    """POST the request to an OpenAI-compatible endpoint with retry.

    Timeouts, connection failures, 5xx, and 429 are retried with exponential
    backoff up to retry.max_attempts total attempts; other 4xx fail
    immediately. Secrets go into headers only and are never logged.
    """
    if settings.kind != "openai_compatible" or not settings.endpoint_url:
        raise BackendRejected(0, "backend settings are not configured for a live endpoint")

    headers = {
        "api-key": secrets.api_key,
        "Authorization": f"Bearer {secrets.api_key}",
        "Content-Type": "application/json",
    }
    body = _wire_body(settings, request)
    owns_client = client is None
    http = client or httpx.Client(timeout=settings.request_timeout_s)
    started = time.monotonic()
    last_failure = "no attempts made"
    retry_after: float | None = None
    try:
        for attempt in range(1, settings.retry.max_attempts + 1):
            if attempt > 1:
                sleep(_backoff_delay(settings, attempt, retry_after))
                retry_after = None
            try:
                response = http.post(
                    settings.endpoint_url,
                    json=body,
                    headers=headers,
                    timeout=settings.request_timeout_s,
                )
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_failure = f"attempt {attempt}: {type(exc).__name__}"
                logger.warning("backend request failed (%s)", last_failure)
                continue

            if response.status_code == 429:
                retry_after = _parse_retry_after(response)
                last_failure = f"attempt {attempt}: HTTP 429"
                logger.warning("backend throttled (%s)", last_failure)
                continue
            if response.status_code >= 500:
                last_failure = f"attempt {attempt}: HTTP {response.status_code}"
                logger.warning("backend server error (%s)", last_failure)
                continue
            if response.status_code >= 400:
                raise BackendRejected(response.status_code)

            try:
                data = response.json()
            except ValueError as exc:
                raise MalformedProviderResponse("provider returned non-JSON body") from exc
            parsed = _parse_provider_response(data)
            return LLMResponse(
                content=parsed.content,
                finish_reason=parsed.finish_reason,
                latency_s=time.monotonic() - started,
                provider_raw_id=parsed.provider_raw_id,
            )
        raise BackendUnavailable(f"retries exhausted; last failure: {last_failure}")
    finally:
        if owns_client:
            http.close()


def _backoff_delay(settings: BackendSettings, attempt: int, retry_after: float | None) -> float:
    if retry_after is not None:
        return retry_after
    return settings.retry.backoff_base_s * (2 ** (attempt - 2))


def _parse_retry_after(response: httpx.Response) -> float | None:
    value = response.headers.get("Retry-After")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class Backend(Protocol):
    """What session handling needs from any completion provider."""

    kind: str

    def complete(self, request: LLMRequest) -> LLMResponse: ...


class MockBackend:
    """Deterministic in-process backend for tests and simulation."""

    kind = "mock"

    def complete(self, request: LLMRequest) -> LLMResponse:
        return mock_complete(request)


class LiveBackend:
    """OpenAI-compatible HTTP backend sharing one connection pool."""

    kind = "openai_compatible"

    def __init__(self, settings: BackendSettings, secrets: SecretsBundle):
        self._settings = settings
        self._secrets = secrets
        self._client = httpx.Client(timeout=settings.request_timeout_s)

    def complete(self, request: LLMRequest) -> LLMResponse:
        return send_chat_completion(
            self._settings, self._secrets, request, client=self._client
        )

    def close(self) -> None:
        self._client.close()
