"""The daemon's public HTTP surface.

Survey pages embed GET /chat in an iframe with the participant id and
condition in the query string; the page carries the rendered history plus a
bootstrap JSON blob the widget script reads. Message relay, phase advance,
authenticated CSV export, and health round out the API. All errors are
structured JSON {code, message}; auth failures return an empty 401 so
nothing about the admin surface leaks.

Handlers run concurrently; per-session serialization lives in the session
manager. Request logs carry no client network addresses and truncate
message content.
"""

from __future__ import annotations

import hmac
import html
import json
import logging
from pathlib import Path
from typing import Sequence

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel
from starlette.middleware.cors import CORSMiddleware

from .backend import Backend
from .config import (
    ID_PATTERN,
    PARTICIPANT_ID_PATTERN,
    SecretsBundle,
    StudyConfig,
    resolve_condition,
)
from .errors import (
    BackendError,
    ConditionMismatch,
    InvalidMessage,
    SessionTurnLimitExceeded,
    StorageFailure,
    SurveyChatError,
    UnknownCondition,
    UnknownLayer,
    UnknownPhase,
)
from .session import PostProcessStage, Session, SessionManager
from .store import StoredTurn, TranscriptStore

logger = logging.getLogger("surveychat.http")

DEFAULT_ASSETS_DIR = Path(__file__).parent / "static"

_STATUS_FOR_ERROR = (
    (InvalidMessage, 400),
    (UnknownCondition, 404),
    (UnknownPhase, 404),
    (UnknownLayer, 404),
    (ConditionMismatch, 409),
    (SessionTurnLimitExceeded, 429),
    (BackendError, 502),
    (StorageFailure, 502),
)


class MessageBody(BaseModel):
    pid: str
    cond: str
    text: str
    phase: str | None = None


class AdvanceBody(BaseModel):
    pid: str
    cond: str
    phase: str


def truncate_for_log(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    return text[:limit] + "..."


def create_app(
    config: StudyConfig,
    secrets: SecretsBundle,
    store: TranscriptStore,
    backend: Backend,
    *,
    allow_origins: Sequence[str] = (),
    assets_dir: str | Path | None = None,
    log_content_chars: int = 80,
    post_process: Sequence[PostProcessStage] = (),
) -> FastAPI:
    manager = SessionManager(config, store, backend, post_process=post_process)
    app = FastAPI(title="surveychat", docs_url=None, redoc_url=None, openapi_url=None)
    app.state.manager = manager
    app.state.config = config
    app.state.store = store

    if allow_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=list(allow_origins),
            allow_methods=["GET", "POST", "OPTIONS"],
            allow_headers=["Content-Type", "X-Admin-Token", "Authorization"],
        )

    assets = Path(assets_dir) if assets_dir else DEFAULT_ASSETS_DIR
    if assets.is_dir():
        app.mount("/static", StaticFiles(directory=str(assets)), name="static")

    @app.exception_handler(SurveyChatError)
    async def handle_domain_error(request: Request, exc: SurveyChatError):
        status = 500
        for klass, code in _STATUS_FOR_ERROR:
            if isinstance(exc, klass):
                status = code
                break
        logger.info("%s %s -> %d (%s)", request.method, request.url.path, status, exc.code)
        return JSONResponse(status_code=status, content={"code": exc.code, "message": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def handle_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"code": "invalid_params", "message": "request body or parameters are invalid"},
        )

    def _validated_ids(pid: str, cond: str, phase: str | None) -> None:
        if not PARTICIPANT_ID_PATTERN.match(pid or ""):
            raise InvalidMessage("pid must match [A-Za-z0-9_#-]{1,64}")
        if not ID_PATTERN.match(cond or ""):
            raise InvalidMessage("cond must match [A-Za-z0-9_-]{1,64}")
        if phase is not None and not ID_PATTERN.match(phase):
            raise InvalidMessage("phase must match [A-Za-z0-9_-]{1,64}")

    def _open(pid: str, cond: str, phase: str | None) -> Session:
        session = manager.open_session(pid, cond)
        if phase is not None:
            session = manager.advance_phase(session, phase)
        return session

    @app.get("/chat", response_class=HTMLResponse)
    def chat_page(pid: str = "", cond: str = "", phase: str | None = None):
        _validated_ids(pid, cond, phase)
        session = _open(pid, cond, phase)
        turns = [
            t for t in store.list_session_turns(session.session_key)
            if t.role in ("user", "assistant")
        ]
        logger.info("GET /chat pid=%s cond=%s phase=%s turns=%d", pid, cond, phase, len(turns))
        return HTMLResponse(render_chat_page(config, session, turns))

    @app.post("/api/message")
    def post_message(body: MessageBody):
        _validated_ids(body.pid, body.cond, body.phase)
        manager.check_message_text(body.text)
        session = _open(body.pid, body.cond, body.phase)
        reply, seq = manager.handle_user_message(session, body.text)
        logger.info(
            "POST /api/message pid=%s seq=%d text=%r", body.pid, seq,
            truncate_for_log(body.text, log_content_chars),
        )
        return {"reply": reply, "seq": seq}

    @app.post("/api/advance")
    def post_advance(body: AdvanceBody):
        _validated_ids(body.pid, body.cond, body.phase)
        session = manager.open_session(body.pid, body.cond)
        session = manager.advance_phase(session, body.phase)
        snapshot = manager.layer_snapshot(session)
        logger.info("POST /api/advance pid=%s phase=%s", body.pid, body.phase)
        return {"current_phase": session.current_phase, "active_layers": list(snapshot)}

    def _authorized(request: Request) -> bool:
        presented = request.headers.get("X-Admin-Token", "")
        auth = request.headers.get("Authorization", "")
        if not presented and auth.startswith("Bearer "):
            presented = auth[len("Bearer "):]
        return hmac.compare_digest(presented.encode(), secrets.admin_token.encode())

    def _export(request: Request, shape: str) -> Response:
        if not _authorized(request):
            return Response(status_code=401)
        condition_id = request.query_params.get("condition_id")
        since = request.query_params.get("since")
        until = request.query_params.get("until")
        if shape == "turns":
            payload = store.export_per_turn_csv(condition_id, since, until)
        else:
            payload = store.export_per_conversation_csv(condition_id, since, until)
        return Response(
            content=payload,
            media_type="text/csv; charset=utf-8",
            headers={"Content-Disposition": f'attachment; filename="{shape}.csv"'},
        )

    @app.get("/api/export/turns")
    def export_turns(request: Request):
        return _export(request, "turns")

    @app.get("/api/export/conversations")
    def export_conversations(request: Request):
        return _export(request, "conversations")

    @app.get("/healthz")
    def healthz():
        try:
            store.healthcheck()
        except StorageFailure as exc:
            return JSONResponse(status_code=503,
                                content={"code": exc.code, "message": str(exc)})
        return {
            "status": "ok",
            "study_id": config.study_id,
            "backend_kind": getattr(backend, "kind", "unknown"),
        }

    return app


# --- widget page -------------------------------------------------------------

_PAGE_STYLE = """
body { margin: 0; font: 15px/1.45 system-ui, sans-serif; background: #fff; }
#chat-root { display: flex; flex-direction: column; height: 100vh; box-sizing: border-box; }
#chat-history { flex: 1; overflow-y: auto; padding: 12px; }
.msg { max-width: 80%; margin: 6px 0; padding: 8px 12px; border-radius: 12px;
       white-space: pre-wrap; overflow-wrap: break-word; }
.msg.user { background: #dbeafe; margin-left: auto; border-bottom-right-radius: 4px; }
.msg.assistant { background: #f3f4f6; margin-right: auto; border-bottom-left-radius: 4px; }
.msg .agent-icon { width: 20px; height: 20px; vertical-align: -4px; margin-right: 6px; }
.msg .agent-name { font-weight: 600; margin-right: 6px; }
#chat-form { display: flex; gap: 8px; padding: 10px; border-top: 1px solid #e5e7eb; }
#chat-input { flex: 1; resize: none; padding: 8px; border: 1px solid #d1d5db;
              border-radius: 8px; font: inherit; }
#chat-send { padding: 8px 18px; border: 0; border-radius: 8px; background: #2563eb;
             color: #fff; cursor: pointer; }
#chat-send:disabled { background: #93c5fd; cursor: wait; }
#chat-status { padding: 4px 12px; color: #6b7280; font-size: 13px; min-height: 1.3em; }
"""


def render_chat_page(config: StudyConfig, session: Session,
                     turns: Sequence[StoredTurn]) -> str:
    """The iframe-embeddable chat page with history and bootstrap data.

    History is rendered server-side so a resumed page shows the prior
    conversation even before (or without) the widget script running; the
    script re-renders from the bootstrap blob when it takes over.
    """
    spec = resolve_condition(config, session.condition_id)
    display = spec.display
    bootstrap = {
        "study_id": config.study_id,
        "participant_id": session.participant_id,
        "condition_id": session.condition_id,
        "current_phase": session.current_phase,
        "display": {
            "icon_url": display.icon_ref,
            "agent_name": display.agent_name,
            "self_reference_mode": display.self_reference_mode,
        },
        "turns": [
            {"seq": t.seq, "role": t.role, "content": t.content,
             "timestamp_utc": t.timestamp_utc}
            for t in turns
        ],
        "limits": {"max_user_message_bytes": config.limits.max_user_message_bytes},
    }
    # "</" would close the script element early if it appeared in content
    bootstrap_json = json.dumps(bootstrap, ensure_ascii=False).replace("</", "<\\/")

    rows = []
    for turn in turns:
        attribution = ""
        if turn.role == "assistant":
            if display.icon_ref:
                attribution += (
                    f'<img class="agent-icon" src="{html.escape(display.icon_ref, quote=True)}" alt="">'
                )
            if display.agent_name:
                attribution += f'<span class="agent-name">{html.escape(display.agent_name)}</span>'
        rows.append(
            f'<div class="msg {html.escape(turn.role)}">{attribution}'
            f"{html.escape(turn.content)}</div>"
        )
    history_html = "\n".join(rows)

    return f"""<!doctype html>
<html lang="en">
<head>
<meta charset="utf-8">
<meta name="viewport" content="width=device-width, initial-scale=1">
<title>Chat</title>
<style>{_PAGE_STYLE}</style>
</head>
<body>
<div id="chat-root">
  <div id="chat-history">
{history_html}
  </div>
  <div id="chat-status"></div>
  <form id="chat-form">
    <textarea id="chat-input" rows="2" aria-label="Message"></textarea>
    <button id="chat-send" type="submit">Send</button>
  </form>
</div>
<script id="surveychat-bootstrap" type="application/json">{bootstrap_json}</script>
<script src="/static/widget.js" defer></script>
</body>
</html>
"""
