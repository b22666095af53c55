"""Shared test utilities: independent oracles, daemon spawning, stub backends.

The request-reconstruction oracle here deliberately reimplements prompt
composition, layer-state folding, context truncation, and canonical JSON
encoding from scratch so it can catch drift in the production code paths.
"""

from __future__ import annotations

import contextlib
import json
import os
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx

from surveychat.backend import LLMRequest, LLMResponse, mock_complete
from surveychat.config import StudyConfig
from surveychat.errors import BackendUnavailable
from surveychat.store import TranscriptStore

# Distinctive values used by every fixture so the hygiene scan can sweep all
# captured logs and bodies for them.
SECRET_API_KEY = "sk-hygiene-3f9acafe-never-log-me"
SECRET_ADMIN_TOKEN = "admtok-hygiene-77beef00-never-log-me"

# stdout/stderr of every daemon subprocess, collected on teardown so the
# hygiene sweep can scan them too
DAEMON_OUTPUT: list[str] = []


def write_secrets_file(directory: Path) -> Path:
    path = directory / "secrets.json"
    path.write_text(
        json.dumps({"api_key": SECRET_API_KEY, "admin_token": SECRET_ADMIN_TOKEN}),
        encoding="utf-8",
    )
    path.chmod(0o600)
    return path


# --- independent context-replay oracle ----------------------------------------

def oracle_layer_state(config: StudyConfig, condition_id: str,
                       turns) -> set[str]:
    """Fold phase directives over the base layers, ignoring stored snapshots."""
    state = set(config.conditions[condition_id].base_prompt_layers)
    for turn in turns:
        if turn.role == "phase_event":
            directive = config.phases[turn.content]
            state = (state - set(directive.deactivate)) | set(directive.activate)
    return state


def oracle_compose(config: StudyConfig, active: set[str]) -> str:
    pairs = sorted(((config.layers[lid].order_rank, lid) for lid in active))
    return "\n\n".join(config.layers[lid].text for _, lid in pairs)


def oracle_request_bytes(config: StudyConfig, store: TranscriptStore,
                         session_key: str, condition_id: str,
                         pending_user_message: str,
                         turns_before_seq: int | None = None) -> bytes:
    """Rebuild the canonical request for a pending message from stored turns.

    ``turns_before_seq`` limits history to turns with seq strictly below it,
    for replaying a request that was issued mid-session.
    """
    turns = store.list_session_turns(session_key)
    if turns_before_seq is not None:
        turns = [t for t in turns if t.seq < turns_before_seq]
    state = oracle_layer_state(config, condition_id, turns)
    messages = [[t.role, t.content] for t in turns if t.role in ("user", "assistant")]
    messages.append(["user", pending_user_message])
    limit = max(config.limits.max_context_messages, 1)
    while len(messages) > limit:
        messages = messages[2:]
    payload = {
        "system_prompt": oracle_compose(config, state),
        "messages": [{"role": r, "content": c} for r, c in messages],
        "model_name": config.backend.model_name,
        "temperature": config.backend.temperature,
        "max_tokens": config.backend.max_response_tokens,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False).encode("utf-8")


# --- stub backends -------------------------------------------------------------

class RecordingBackend:
    """Mock backend that keeps every request it served, in order."""

    kind = "mock"

    def __init__(self):
        self.requests: list[LLMRequest] = []

    def complete(self, request: LLMRequest) -> LLMResponse:
        self.requests.append(request)
        return mock_complete(request)


class FailingBackend:
    kind = "mock"

    def complete(self, request: LLMRequest) -> LLMResponse:
        raise BackendUnavailable("stub backend is hard-down")


class CannedBackend:
    kind = "mock"

    def __init__(self, content: str):
        self.content = content

    def complete(self, request: LLMRequest) -> LLMResponse:
        return LLMResponse(content=self.content)


# --- real daemon subprocess ----------------------------------------------------

def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class Daemon:
    def __init__(self, port: int, process: subprocess.Popen, db_path: Path):
        self.port = port
        self.process = process
        self.db_path = db_path

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"


@contextlib.contextmanager
def run_daemon(tmp_path: Path, config_path: Path, *, db_path: Path | None = None,
               backend: str = "mock", extra_env: dict | None = None,
               wait: bool = True):
    """Launch ``surveychat serve`` as a subprocess and wait for /healthz."""
    port = free_port()
    db = db_path or (tmp_path / "daemon.db")
    secrets = write_secrets_file(tmp_path)
    env = dict(os.environ)
    env.update(extra_env or {})
    process = subprocess.Popen(
        [sys.executable, "-m", "surveychat.cli", "serve",
         "--config", str(config_path),
         "--secrets", str(secrets),
         "--db", str(db),
         "--listen", f"127.0.0.1:{port}",
         "--backend", backend,
         "--log-level", "warning"],
        env=env,
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
    )
    daemon = Daemon(port, process, db)
    try:
        if wait:
            wait_for_health(daemon.base_url)
        yield daemon
    finally:
        if process.poll() is None:
            process.terminate()
            try:
                process.wait(timeout=10)
            except subprocess.TimeoutExpired:
                process.kill()
                process.wait()
        output, _ = process.communicate()
        if output:
            DAEMON_OUTPUT.append(output.decode("utf-8", errors="replace"))


def wait_for_health(base_url: str, timeout_s: float = 20.0) -> None:
    deadline = time.monotonic() + timeout_s
    last_error = None
    while time.monotonic() < deadline:
        try:
            if httpx.get(base_url + "/healthz", timeout=2.0).status_code == 200:
                return
        except httpx.TransportError as exc:
            last_error = exc
        time.sleep(0.05)
    raise RuntimeError(f"daemon at {base_url} never became healthy: {last_error}")
