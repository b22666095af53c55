"""Scripted concurrent participants driven against a running daemon.

The simulator is the desk-scale stand-in for live data collection: it
bootstraps N sessions over plain HTTP, sends templated messages carrying a
per-session sentinel token, advances phases on schedule, and records every
observation. verify_report then cross-checks the observations against a
per-turn CSV export: message presence, sentinel isolation, gapless
sequence numbers, and exact row counts.

With the mock backend a run is fully deterministic given the script (and
its seed): participant ids, sentinels, condition assignment, and therefore
every reply are reproducible, latencies aside.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import httpx

from .errors import DbUnreadable, ScriptInvalid, StorageFailure, TargetUnreachable
from .store import TranscriptStore

ASSIGNMENT_MODES = ("round_robin", "fixed", "random")


@dataclass(frozen=True)
class SimScript:
    n_sessions: int
    turns_per_session: int
    assignment_mode: str = "round_robin"
    conditions: tuple[str, ...] = ()
    fixed_condition: str | None = None
    phase_schedule: tuple[tuple[int, str], ...] = ()
    message_template: str = "s{session_index} t{turn_index} {sentinel}"
    seed: int = 0

    def condition_for(self, session_index: int) -> str:
        if self.assignment_mode == "fixed":
            return self.fixed_condition or ""
        if self.assignment_mode == "round_robin":
            return self.conditions[session_index % len(self.conditions)]
        rng = random.Random(f"{self.seed}:{session_index}")
        return rng.choice(list(self.conditions))

    def participant_for(self, session_index: int) -> str:
        return f"sim{self.seed}_{session_index:04d}"

    def sentinel_for(self, session_index: int) -> str:
        digest = hashlib.sha256(f"{self.seed}:{session_index}".encode()).hexdigest()
        return f"snt{digest[:12]}"

    def message_for(self, session_index: int, turn_index: int) -> str:
        return self.message_template.format(
            session_index=session_index,
            turn_index=turn_index,
            sentinel=self.sentinel_for(session_index),
        )


def load_sim_script(data: dict[str, Any]) -> SimScript:
    """Validate a script dict (usually from a JSON file)."""
    if not isinstance(data, dict):
        raise ScriptInvalid("script must be a JSON object")
    known = {"n_sessions", "turns_per_session", "condition_assignment",
             "phase_schedule", "message_template", "seed"}
    extra = set(data) - known
    if extra:
        raise ScriptInvalid(f"unknown script keys: {', '.join(sorted(extra))}")

    n_sessions = data.get("n_sessions")
    if not isinstance(n_sessions, int) or n_sessions < 1:
        raise ScriptInvalid("n_sessions must be an integer >= 1")
    turns = data.get("turns_per_session", 0)
    if not isinstance(turns, int) or turns < 0:
        raise ScriptInvalid("turns_per_session must be an integer >= 0")

    assignment = data.get("condition_assignment", {})
    if not isinstance(assignment, dict):
        raise ScriptInvalid("condition_assignment must be an object")
    mode = assignment.get("mode", "round_robin")
    if mode not in ASSIGNMENT_MODES:
        raise ScriptInvalid(f"condition_assignment.mode must be one of {', '.join(ASSIGNMENT_MODES)}")
    conditions = tuple(assignment.get("conditions", ()))
    fixed = assignment.get("condition_id")
    if mode == "fixed":
        if not fixed or not isinstance(fixed, str):
            raise ScriptInvalid("fixed assignment requires condition_id")
    elif not conditions or not all(isinstance(c, str) for c in conditions):
        raise ScriptInvalid(f"{mode} assignment requires a non-empty conditions list")

    schedule = []
    for i, entry in enumerate(data.get("phase_schedule", [])):
        ok = isinstance(entry, (list, tuple)) and len(entry) == 2 \
            and isinstance(entry[0], int) and entry[0] >= 0 and isinstance(entry[1], str)
        if not ok:
            raise ScriptInvalid(f"phase_schedule[{i}] must be [after_turn, phase_id]")
        schedule.append((entry[0], entry[1]))

    template = data.get("message_template", SimScript.message_template)
    if not isinstance(template, str) or not template:
        raise ScriptInvalid("message_template must be a non-empty string")
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ScriptInvalid("seed must be an integer")

    return SimScript(
        n_sessions=n_sessions,
        turns_per_session=turns,
        assignment_mode=mode,
        conditions=conditions,
        fixed_condition=fixed,
        phase_schedule=tuple(sorted(schedule)),
        message_template=template,
        seed=seed,
    )


def load_sim_script_file(path: str | Path) -> SimScript:
    path = Path(path)
    if not path.exists():
        raise ScriptInvalid(f"script file not found: {path}")
    try:
        return load_sim_script(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ScriptInvalid(f"script is not valid JSON: {exc}") from exc


@dataclass
class SimEvent:
    kind: str  # bootstrap | message | advance
    status: int
    latency_ms: float
    turn_index: int | None = None
    sent: str | None = None
    reply: str | None = None
    seq: int | None = None
    phase: str | None = None
    phase_changed: bool = False
    error: str | None = None


@dataclass
class SessionResult:
    session_index: int
    participant_id: str
    condition_id: str
    sentinel: str
    events: list[SimEvent] = field(default_factory=list)


@dataclass
class SimReport:
    target: str
    concurrency: int
    script: dict[str, Any]
    sessions: list[SessionResult] = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_json_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "SimReport":
        sessions = [
            SessionResult(
                session_index=s["session_index"],
                participant_id=s["participant_id"],
                condition_id=s["condition_id"],
                sentinel=s["sentinel"],
                events=[SimEvent(**e) for e in s.get("events", [])],
            )
            for s in data.get("sessions", [])
        ]
        return cls(
            target=data.get("target", ""),
            concurrency=data.get("concurrency", 1),
            script=data.get("script", {}),
            sessions=sessions,
            wall_time_s=data.get("wall_time_s", 0.0),
        )


@dataclass(frozen=True)
class ReportViolation:
    kind: str
    message: str


def run_simulation(script: SimScript, target: str, concurrency: int) -> SimReport:
    """Execute the script with at most ``concurrency`` sessions in flight.

    Each simulated participant gets its own HTTP client, like a real
    participant has their own browser; nothing transport-level is shared
    across sessions.
    """
    target = target.rstrip("/")
    try:
        health = httpx.get(target + "/healthz", timeout=10.0)
    except httpx.TransportError as exc:
        raise TargetUnreachable(f"cannot reach {target}: {exc}") from exc
    if health.status_code != 200:
        raise TargetUnreachable(f"{target}/healthz returned {health.status_code}")

    started = time.monotonic()
    with ThreadPoolExecutor(max_workers=max(concurrency, 1)) as pool:
        futures = [
            pool.submit(_run_session_with_client, target, script, i)
            for i in range(script.n_sessions)
        ]
        sessions = [f.result() for f in futures]
    wall = time.monotonic() - started

    return SimReport(
        target=target,
        concurrency=concurrency,
        script={
            "n_sessions": script.n_sessions,
            "turns_per_session": script.turns_per_session,
            "condition_assignment": {
                "mode": script.assignment_mode,
                "conditions": list(script.conditions),
                "condition_id": script.fixed_condition,
            },
            "phase_schedule": [list(p) for p in script.phase_schedule],
            "message_template": script.message_template,
            "seed": script.seed,
        },
        sessions=sessions,
        wall_time_s=wall,
    )


def _run_session_with_client(target: str, script: SimScript, index: int) -> SessionResult:
    with httpx.Client(base_url=target, timeout=60.0) as client:
        return _run_session(client, script, index)


def _run_session(client: httpx.Client, script: SimScript, index: int) -> SessionResult:
    pid = script.participant_for(index)
    cond = script.condition_for(index)
    result = SessionResult(
        session_index=index,
        participant_id=pid,
        condition_id=cond,
        sentinel=script.sentinel_for(index),
    )
    current_phase: str | None = None

    result.events.append(_timed(
        lambda: client.get("/chat", params={"pid": pid, "cond": cond}),
        SimEvent(kind="bootstrap", status=0, latency_ms=0.0),
        idempotent=True,
    ))

    def advance_due(completed_turns: int) -> None:
        nonlocal current_phase
        for after_turn, phase_id in script.phase_schedule:
            if after_turn != completed_turns:
                continue
            event = SimEvent(kind="advance", status=0, latency_ms=0.0, phase=phase_id,
                             phase_changed=(phase_id != current_phase))
            # re-advancing to the same phase is a server-side no-op, so this
            # call is safe to retry after any transport failure
            done = _timed(
                lambda: client.post("/api/advance",
                                    json={"pid": pid, "cond": cond, "phase": phase_id}),
                event,
                idempotent=True,
            )
            result.events.append(done)
            if done.status == 200 and done.phase_changed:
                current_phase = phase_id

    advance_due(0)
    for turn_index in range(1, script.turns_per_session + 1):
        text = script.message_for(index, turn_index)
        event = SimEvent(kind="message", status=0, latency_ms=0.0,
                         turn_index=turn_index, sent=text)

        def send():
            return client.post("/api/message",
                               json={"pid": pid, "cond": cond, "text": text})

        done = _timed(send, event)
        result.events.append(done)
        advance_due(turn_index)
    return result


def _timed(call, event: SimEvent, *, idempotent: bool = False) -> SimEvent:
    """Run one HTTP call, recording status and latency.

    Connection churn is retried once when it cannot have produced server-side
    effects: ConnectError/WriteError mean the request never fully reached the
    server, and idempotent calls may be retried after any transport failure.
    """
    started = time.monotonic()
    response = None
    for attempt in (1, 2):
        try:
            response = call()
            break
        except (httpx.ConnectError, httpx.WriteError) as exc:
            event.error = type(exc).__name__
        except httpx.TransportError as exc:
            event.error = type(exc).__name__
            if not idempotent:
                break
        if attempt == 2:
            break
    event.latency_ms = (time.monotonic() - started) * 1000
    if response is None:
        event.status = 0
        return event
    event.error = None
    event.status = response.status_code
    if event.kind == "message" and response.status_code == 200:
        body = response.json()
        event.reply = body.get("reply")
        event.seq = body.get("seq")
    return event


# --- verification against the export ---------------------------------------

def verify_report(report: SimReport, exported_turns_csv: bytes) -> list[ReportViolation]:
    """Cross-check a simulation report against a per-turn CSV export.

    Checks: every sent message exported exactly once, sentinel isolation
    across sessions, gapless per-session seqs, and total row count equal to
    what the recorded statuses imply.
    """
    violations: list[ReportViolation] = []
    reader = csv.reader(io.StringIO(exported_turns_csv.decode("utf-8")))
    rows = list(reader)
    if not rows:
        return [ReportViolation("export", "export has no header row")]
    header, data_rows = rows[0], rows[1:]
    col = {name: i for i, name in enumerate(header)}
    for required in ("participant_id", "seq", "role", "content"):
        if required not in col:
            return [ReportViolation("export", f"export is missing column {required!r}")]

    by_participant: dict[str, list[list[str]]] = {}
    for row in data_rows:
        by_participant.setdefault(row[col["participant_id"]], []).append(row)

    expected_total_rows = 0
    for session in report.sessions:
        rows_for = by_participant.get(session.participant_id, [])
        contents_user = [r[col["content"]] for r in rows_for if r[col["role"]] == "user"]

        for event in session.events:
            if event.kind == "message":
                # status 0 means the connection dropped mid-request; whether
                # the user turn persisted is unknowable, so no expectations
                if event.status == 200:
                    expected_total_rows += 2
                elif event.status == 502:
                    expected_total_rows += 1  # user turn kept on backend failure
                if event.sent is not None and event.status in (200, 502):
                    count = contents_user.count(event.sent)
                    if count != 1:
                        violations.append(ReportViolation(
                            "missing_message" if count == 0 else "duplicated_message",
                            f"session {session.session_index}: message {event.sent!r} "
                            f"appears {count} times in the export",
                        ))
            elif event.kind == "advance" and event.status == 200 and event.phase_changed:
                expected_total_rows += 1

        seqs = sorted(int(r[col["seq"]]) for r in rows_for)
        if seqs != list(range(1, len(seqs) + 1)):
            violations.append(ReportViolation(
                "seq_gap",
                f"session {session.session_index}: seqs are not 1..{len(seqs)}: {seqs[:20]}",
            ))

    for session in report.sessions:
        for other in report.sessions:
            if other.session_index == session.session_index:
                continue
            if _sentinel_in_session(session.sentinel, other, by_participant, col):
                violations.append(ReportViolation(
                    "isolation",
                    f"sentinel of session {session.session_index} leaked into "
                    f"session {other.session_index}",
                ))

    if len(data_rows) != expected_total_rows:
        violations.append(ReportViolation(
            "row_count",
            f"export has {len(data_rows)} rows; expected {expected_total_rows}",
        ))
    return violations


def _sentinel_in_session(sentinel: str, other: SessionResult,
                         by_participant: dict[str, list[list[str]]],
                         col: dict[str, int]) -> bool:
    for event in other.events:
        if event.reply and sentinel in event.reply:
            return True
    for row in by_participant.get(other.participant_id, []):
        if sentinel in row[col["content"]]:
            return True
    return False


# --- offline export ----------------------------------------------------------

def export_cli(db_path: str | Path, shape: str, out_path: str | Path) -> Path:
    """Write the same bytes the HTTP export endpoints would produce."""
    db_path = Path(db_path)
    if not db_path.is_file():
        raise DbUnreadable(f"database file not found: {db_path}")
    try:
        store = TranscriptStore(db_path)
    except StorageFailure as exc:
        raise DbUnreadable(str(exc)) from exc
    try:
        if shape == "turns":
            payload = store.export_per_turn_csv()
        elif shape == "conversations":
            payload = store.export_per_conversation_csv()
        else:
            raise DbUnreadable(f"unknown export shape {shape!r}")
    finally:
        store.close()
    out_path = Path(out_path)
    out_path.write_bytes(payload)
    return out_path
