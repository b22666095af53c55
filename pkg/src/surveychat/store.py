"""Durable, append-ordered persistence of sessions and turns, plus the two
research export shapes (one row per statement, one row per conversation).

Backed by a single-file SQLite database in WAL mode with synchronous=FULL,
so a turn that append_turn has acknowledged survives a process kill. All
access goes through one connection guarded by a lock: appends across
sessions are serialized in a writer queue, which keeps (session_key, seq)
assignment atomic without any cross-process coordination.
"""

from __future__ import annotations

import logging
import sqlite3
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import StorageFailure, UnknownSession

logger = logging.getLogger("surveychat.store")

TURN_ROLES = ("user", "assistant", "phase_event")

PER_TURN_HEADER = (
    "study_id", "session_key", "participant_id", "condition_id",
    "seq", "role", "content", "active_layers", "timestamp_utc",
)
PER_CONVERSATION_HEADER = (
    "study_id", "session_key", "participant_id", "condition_id",
    "created_at", "turn_count", "transcript",
)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS sessions (
    session_key    TEXT PRIMARY KEY,
    study_id       TEXT NOT NULL,
    participant_id TEXT NOT NULL,
    condition_id   TEXT NOT NULL,
    created_at     TEXT NOT NULL,
    current_phase  TEXT
);
CREATE TABLE IF NOT EXISTS turns (
    session_key   TEXT NOT NULL REFERENCES sessions(session_key),
    seq           INTEGER NOT NULL,
    role          TEXT NOT NULL CHECK (role IN ('user', 'assistant', 'phase_event')),
    content       TEXT NOT NULL,
    active_layers TEXT NOT NULL,
    timestamp_utc TEXT NOT NULL,
    PRIMARY KEY (session_key, seq)
);
"""


def utc_now_rfc3339() -> str:
    """Current UTC time as RFC 3339 with milliseconds and Z suffix."""
    now = datetime.now(timezone.utc)
    return f"{now:%Y-%m-%dT%H:%M:%S}.{now.microsecond // 1000:03d}Z"


@dataclass(frozen=True)
class StoredTurn:
    study_id: str
    session_key: str
    participant_id: str
    condition_id: str
    seq: int
    role: str
    content: str
    active_layers_snapshot: tuple[str, ...]  # layer ids in rank order
    timestamp_utc: str


@dataclass(frozen=True)
class SessionRecord:
    session_key: str
    study_id: str
    participant_id: str
    condition_id: str
    created_at: str
    current_phase: str | None
    turn_count: int


class TranscriptStore:
    """SQLite-backed store; safe for concurrent use from many threads."""

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._lock = threading.RLock()
        try:
            self._conn = sqlite3.connect(str(self._path), check_same_thread=False)
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA synchronous=FULL")
            self._conn.executescript(_SCHEMA)
            self._conn.commit()
        except sqlite3.Error as exc:
            raise StorageFailure(f"cannot open transcript database at {self._path}: {exc}") from exc

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- sessions -------------------------------------------------------

    def create_session(self, session_key: str, study_id: str, participant_id: str,
                       condition_id: str) -> SessionRecord:
        created_at = utc_now_rfc3339()
        with self._lock:
            try:
                self._conn.execute(
                    "INSERT INTO sessions (session_key, study_id, participant_id,"
                    " condition_id, created_at, current_phase) VALUES (?, ?, ?, ?, ?, NULL)",
                    (session_key, study_id, participant_id, condition_id, created_at),
                )
                self._conn.commit()
            except sqlite3.IntegrityError as exc:
                raise StorageFailure(f"session {session_key!r} already exists") from exc
            except sqlite3.Error as exc:
                raise StorageFailure(f"session create failed: {exc}") from exc
        return SessionRecord(
            session_key=session_key,
            study_id=study_id,
            participant_id=participant_id,
            condition_id=condition_id,
            created_at=created_at,
            current_phase=None,
            turn_count=0,
        )

    def get_session(self, session_key: str) -> SessionRecord | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT s.session_key, s.study_id, s.participant_id, s.condition_id,"
                " s.created_at, s.current_phase,"
                " (SELECT COUNT(*) FROM turns t WHERE t.session_key = s.session_key)"
                " FROM sessions s WHERE s.session_key = ?",
                (session_key,),
            ).fetchone()
        if row is None:
            return None
        return SessionRecord(
            session_key=row[0], study_id=row[1], participant_id=row[2],
            condition_id=row[3], created_at=row[4], current_phase=row[5],
            turn_count=row[6],
        )

    def set_current_phase(self, session_key: str, phase_id: str) -> None:
        with self._lock:
            cursor = self._conn.execute(
                "UPDATE sessions SET current_phase = ? WHERE session_key = ?",
                (phase_id, session_key),
            )
            self._conn.commit()
        if cursor.rowcount == 0:
            raise UnknownSession(f"no session record for {session_key!r}")

    def list_sessions(self, condition_id: str | None = None) -> list[SessionRecord]:
        sql = (
            "SELECT s.session_key, s.study_id, s.participant_id, s.condition_id,"
            " s.created_at, s.current_phase,"
            " (SELECT COUNT(*) FROM turns t WHERE t.session_key = s.session_key)"
            " FROM sessions s"
        )
        params: tuple = ()
        if condition_id is not None:
            sql += " WHERE s.condition_id = ?"
            params = (condition_id,)
        sql += " ORDER BY s.session_key"
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        return [
            SessionRecord(session_key=r[0], study_id=r[1], participant_id=r[2],
                          condition_id=r[3], created_at=r[4], current_phase=r[5],
                          turn_count=r[6])
            for r in rows
        ]

    # -- turns ------------------------------------------------------------

    def append_turn(self, session_key: str, role: str, content: str,
                    active_layers: tuple[str, ...]) -> StoredTurn:
        """Assign the next seq and persist durably before returning.

        The store is the single clock: timestamps are taken here and clamped
        so they never decrease within a session.
        """
        if role not in TURN_ROLES:
            raise StorageFailure(f"unknown turn role {role!r}")
        with self._lock:
            session = self.get_session(session_key)
            if session is None:
                raise UnknownSession(f"no session record for {session_key!r}")
            row = self._conn.execute(
                "SELECT COALESCE(MAX(seq), 0), MAX(timestamp_utc) FROM turns WHERE session_key = ?",
                (session_key,),
            ).fetchone()
            seq = row[0] + 1
            timestamp = utc_now_rfc3339()
            if row[1] is not None and row[1] > timestamp:
                timestamp = row[1]
            try:
                self._conn.execute(
                    "INSERT INTO turns (session_key, seq, role, content, active_layers,"
                    " timestamp_utc) VALUES (?, ?, ?, ?, ?, ?)",
                    (session_key, seq, role, content, ",".join(active_layers), timestamp),
                )
                self._conn.commit()
            except sqlite3.Error as exc:
                raise StorageFailure(f"turn append failed: {exc}") from exc
        return StoredTurn(
            study_id=session.study_id,
            session_key=session_key,
            participant_id=session.participant_id,
            condition_id=session.condition_id,
            seq=seq,
            role=role,
            content=content,
            active_layers_snapshot=active_layers,
            timestamp_utc=timestamp,
        )

    def list_session_turns(self, session_key: str) -> list[StoredTurn]:
        """All turns for a session in seq order; [] for an unknown key."""
        with self._lock:
            rows = self._conn.execute(
                "SELECT t.seq, t.role, t.content, t.active_layers, t.timestamp_utc,"
                " s.study_id, s.participant_id, s.condition_id"
                " FROM turns t JOIN sessions s ON s.session_key = t.session_key"
                " WHERE t.session_key = ? ORDER BY t.seq",
                (session_key,),
            ).fetchall()
        return [self._turn_from_row(session_key, r) for r in rows]

    @staticmethod
    def _turn_from_row(session_key: str, r: tuple) -> StoredTurn:
        layers = tuple(r[3].split(",")) if r[3] else ()
        return StoredTurn(
            study_id=r[5], session_key=session_key, participant_id=r[6],
            condition_id=r[7], seq=r[0], role=r[1], content=r[2],
            active_layers_snapshot=layers, timestamp_utc=r[4],
        )

    def latest_layer_snapshot(self, session_key: str) -> tuple[str, ...] | None:
        """Layer state in effect after the most recent turn, if any."""
        with self._lock:
            row = self._conn.execute(
                "SELECT active_layers FROM turns WHERE session_key = ?"
                " ORDER BY seq DESC LIMIT 1",
                (session_key,),
            ).fetchone()
        if row is None:
            return None
        return tuple(row[0].split(",")) if row[0] else ()

    def count_turns(self, session_key: str, role: str | None = None) -> int:
        sql = "SELECT COUNT(*) FROM turns WHERE session_key = ?"
        params: list = [session_key]
        if role is not None:
            sql += " AND role = ?"
            params.append(role)
        with self._lock:
            return self._conn.execute(sql, params).fetchone()[0]

    # -- health ---------------------------------------------------------

    def healthcheck(self) -> None:
        """Raise StorageFailure when the database is gone or unusable."""
        if str(self._path) != ":memory:" and not self._path.exists():
            raise StorageFailure(f"database file missing: {self._path}")
        try:
            with self._lock:
                self._conn.execute("SELECT COUNT(*) FROM sessions").fetchone()
        except sqlite3.Error as exc:
            raise StorageFailure(f"database unusable: {exc}") from exc

    # -- exports ----------------------------------------------------------

    def export_per_turn_csv(self, condition_id: str | None = None,
                            since: str | None = None,
                            until: str | None = None) -> bytes:
        """One row per stored turn (phase events included), ordered by
        (session_key, seq). RFC 4180 quoting, UTF-8, LF row terminators."""
        sql = (
            "SELECT s.study_id, t.session_key, s.participant_id, s.condition_id,"
            " t.seq, t.role, t.content, t.active_layers, t.timestamp_utc"
            " FROM turns t JOIN sessions s ON s.session_key = t.session_key"
        )
        clauses, params = _filter_clauses(condition_id, since, until)
        if clauses:
            sql += " WHERE " + " AND ".join(clauses)
        sql += " ORDER BY t.session_key, t.seq"
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        lines = [_csv_row(PER_TURN_HEADER)]
        for r in rows:
            lines.append(_csv_row((r[0], r[1], r[2], r[3], str(r[4]), r[5], r[6], r[7], r[8])))
        return "".join(lines).encode("utf-8")

    def export_per_conversation_csv(self, condition_id: str | None = None,
                                    since: str | None = None,
                                    until: str | None = None) -> bytes:
        """One row per session; the transcript joins turns as ``[role] content``
        lines, with phase events rendered as ``[phase] <phase_id>``."""
        sessions = self.list_sessions(condition_id)
        if since or until:
            sessions = [
                s for s in sessions
                if (since is None or s.created_at >= since)
                and (until is None or s.created_at <= until)
            ]
        lines = [_csv_row(PER_CONVERSATION_HEADER)]
        for record in sessions:
            parts = []
            for turn in self.list_session_turns(record.session_key):
                if turn.role == "phase_event":
                    parts.append(f"[phase] {turn.content}")
                else:
                    parts.append(f"[{turn.role}] {turn.content}")
            lines.append(_csv_row((
                record.study_id, record.session_key, record.participant_id,
                record.condition_id, record.created_at, str(record.turn_count),
                "\n".join(parts),
            )))
        return "".join(lines).encode("utf-8")


def _filter_clauses(condition_id, since, until):
    clauses, params = [], []
    if condition_id is not None:
        clauses.append("s.condition_id = ?")
        params.append(condition_id)
    if since is not None:
        clauses.append("t.timestamp_utc >= ?")
        params.append(since)
    if until is not None:
        clauses.append("t.timestamp_utc <= ?")
        params.append(until)
    return clauses, params


def _csv_field(value: str) -> str:
    """Quote per RFC 4180: wrap and double quotes when the field contains a
    comma, quote, or line break."""
    if any(ch in value for ch in (",", '"', "\n", "\r")):
        return '"' + value.replace('"', '""') + '"'
    return value


def _csv_row(fields) -> str:
    return ",".join(_csv_field(f) for f in fields) + "\n"
