"""Per-participant conversation state machine.

A session is one participant's continuous conversation, keyed by
study_id/participant_id so it survives survey page advances. The backend is
stateless, so every turn replays the composed system prompt plus the full
prior message history. Everything that happens (user message, assistant
reply, phase advance) is appended to the transcript store, making the log
alone sufficient to reconstruct the prompt state at any point.

Sessions proceed fully in parallel; within one session, turn handling is
serialized by a per-session lock, so simultaneous double-submits from one
participant become two ordered turns instead of interleaved corruption.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .backend import Backend, LLMRequest, LLMResponse
from .config import PARTICIPANT_ID_PATTERN, StudyConfig, resolve_condition
from .errors import (
    ConditionMismatch,
    InvalidMessage,
    MessageTooLarge,
    SessionTurnLimitExceeded,
    UnknownPhase,
)
from .faults import AFTER_USER_TURN_APPEND, fault_point
from .prompts import apply_phase, compose_system_prompt
from .store import TranscriptStore

logger = logging.getLogger("surveychat.session")

PostProcessStage = Callable[[str, "Session"], str]


@dataclass(frozen=True)
class Session:
    session_key: str
    participant_id: str
    condition_id: str
    active_layers: frozenset[str]
    next_seq: int
    created_at: str
    current_phase: str | None = None


def session_key_for(study_id: str, participant_id: str) -> str:
    return f"{study_id}/{participant_id}"


def strip_trailing_whitespace(text: str, session: Session) -> str:
    return text.rstrip()


POST_PROCESS_STAGES: dict[str, PostProcessStage] = {
    "strip_trailing_whitespace": strip_trailing_whitespace,
}


class SessionManager:
    """Owns session lifecycle and turn handling for one study.

    ``post_process`` is the extension point for augmenting assistant replies
    before they are logged and delivered; the default pipeline is empty
    (pass-through).
    """

    def __init__(self, config: StudyConfig, store: TranscriptStore, backend: Backend,
                 post_process: Sequence[PostProcessStage] = ()):
        self.config = config
        self.store = store
        self.backend = backend
        self.post_process_stages = tuple(post_process)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _session_lock(self, session_key: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(session_key)
            if lock is None:
                lock = self._locks[session_key] = threading.Lock()
            return lock

    # -- lifecycle --------------------------------------------------------

    def open_session(self, participant_id: str, condition_id: str) -> Session:
        """Create the session on first contact, or resume it with stored state.

        Resuming with a different condition than the stored one is rejected:
        that means the survey flow mislabeled the participant, and silently
        forking or rewriting the assignment would corrupt the experiment.
        """
        if not PARTICIPANT_ID_PATTERN.match(participant_id or ""):
            raise InvalidMessage(
                f"participant id {participant_id!r} must match [A-Za-z0-9_#-]{{1,64}}"
            )
        spec = resolve_condition(self.config, condition_id)
        key = session_key_for(self.config.study_id, participant_id)
        with self._session_lock(key):
            record = self.store.get_session(key)
            if record is None:
                record = self.store.create_session(
                    key, self.config.study_id, participant_id, condition_id
                )
                logger.info("session opened key=%s condition=%s", key, condition_id)
            elif record.condition_id != condition_id:
                raise ConditionMismatch(
                    f"session {key!r} was opened with condition "
                    f"{record.condition_id!r}, not {condition_id!r}"
                )
            snapshot = self.store.latest_layer_snapshot(key)
            active = frozenset(snapshot) if snapshot is not None else frozenset(spec.base_prompt_layers)
            return Session(
                session_key=key,
                participant_id=participant_id,
                condition_id=record.condition_id,
                active_layers=active,
                next_seq=record.turn_count + 1,
                created_at=record.created_at,
                current_phase=record.current_phase,
            )

    def advance_phase(self, session: Session, phase_id: str) -> Session:
        """Apply a phase directive and log it as a phase_event turn.

        Re-advancing to the already-current phase is a no-op: survey pages
        re-embed the chat on reload, and each reload must not spam events.
        """
        directive = self.config.phases.get(phase_id)
        if directive is None:
            raise UnknownPhase(
                f"phase {phase_id!r} is not defined in study {self.config.study_id!r}"
            )
        with self._session_lock(session.session_key):
            if session.current_phase == phase_id:
                return session
            new_layers = apply_phase(session.active_layers, directive)
            snapshot = self._rank_ordered(new_layers)
            turn = self.store.append_turn(session.session_key, "phase_event", phase_id, snapshot)
            self.store.set_current_phase(session.session_key, phase_id)
            logger.info("phase advanced key=%s phase=%s seq=%d",
                        session.session_key, phase_id, turn.seq)
            return replace(
                session,
                active_layers=new_layers,
                next_seq=turn.seq + 1,
                current_phase=phase_id,
            )

    # -- turn handling ------------------------------------------------------

    def build_llm_request(self, session: Session, pending_user_message: str) -> LLMRequest:
        """Replay the full context: composed system prompt, all prior
        user/assistant turns in order, then the pending message.

        When the total exceeds limits.max_context_messages, the oldest pair
        of messages is dropped repeatedly; the system prompt and the pending
        message always survive.
        """
        self.check_message_text(pending_user_message)
        prompt = compose_system_prompt(self.config, session.active_layers)
        messages = [
            (turn.role, turn.content)
            for turn in self.store.list_session_turns(session.session_key)
            if turn.role in ("user", "assistant")
        ]
        messages.append(("user", pending_user_message))
        limit = self.config.limits.max_context_messages
        while len(messages) > max(limit, 1):
            del messages[:2]
        return LLMRequest(
            system_prompt=prompt.text,
            messages=tuple(messages),
            model_name=self.config.backend.model_name,
            temperature=self.config.backend.temperature,
            max_tokens=self.config.backend.max_response_tokens,
        )

    def handle_user_message(self, session: Session, text: str) -> tuple[str, int]:
        """Run one full turn; returns the delivered reply and its seq.

        The user turn is persisted before the backend is called, so a
        backend failure (or a crash) never loses what the participant said;
        they can retry without retyping and the log stays truthful.
        """
        with self._session_lock(session.session_key):
            self.check_message_text(text)
            user_turns = self.store.count_turns(session.session_key, role="user")
            if user_turns >= self.config.limits.max_turns_per_session:
                raise SessionTurnLimitExceeded(
                    f"session {session.session_key!r} reached the limit of "
                    f"{self.config.limits.max_turns_per_session} user messages"
                )
            request = self.build_llm_request(session, text)
            self.store.append_turn(
                session.session_key, "user", text, self._rank_ordered(session.active_layers)
            )
            fault_point(AFTER_USER_TURN_APPEND)
            response = self.backend.complete(request)
            final_text = self.post_process_response(response, session)
            turn = self.store.append_turn(
                session.session_key, "assistant", final_text,
                self._rank_ordered(session.active_layers),
            )
            logger.info("turn completed key=%s seq=%d reply_bytes=%d",
                        session.session_key, turn.seq, len(final_text.encode("utf-8")))
            return final_text, turn.seq

    def post_process_response(self, response: LLMResponse, session: Session) -> str:
        """Run the configured augmentation pipeline; identity by default."""
        text = response.content
        for stage in self.post_process_stages:
            text = stage(text, session)
        return text

    # -- helpers ----------------------------------------------------------

    def layer_snapshot(self, session: Session) -> tuple[str, ...]:
        """The session's active layers in composition (rank) order."""
        return self._rank_ordered(session.active_layers)

    def check_message_text(self, text: str) -> None:
        if not text:
            raise InvalidMessage("message text must be non-empty")
        size = len(text.encode("utf-8"))
        limit = self.config.limits.max_user_message_bytes
        if size > limit:
            raise MessageTooLarge(f"message is {size} bytes; the limit is {limit}")

    def _rank_ordered(self, layers: frozenset[str]) -> tuple[str, ...]:
        return compose_system_prompt(self.config, layers).constituent_layers
