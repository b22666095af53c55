from __future__ import annotations

import json
import random
import threading
from dataclasses import replace

import pytest

from surveychat.backend import LLMResponse, MockBackend, canonical_request_bytes, mock_complete
from surveychat.config import parse_study_config
from surveychat.errors import (
    BackendUnavailable,
    ConditionMismatch,
    InvalidMessage,
    MessageTooLarge,
    SessionTurnLimitExceeded,
    UnknownCondition,
    UnknownPhase,
)
from surveychat.session import SessionManager, strip_trailing_whitespace
from surveychat.store import TranscriptStore

from helpers import FailingBackend, RecordingBackend, oracle_request_bytes


# --- open_session ---------------------------------------------------------

def test_open_session_first_call(manager, poem_config):
    session = manager.open_session("P_a#4567y", "3")
    assert session.session_key == "poem_study/P_a#4567y"
    assert session.next_seq == 1
    assert session.active_layers == frozenset(
        poem_config.conditions["3"].base_prompt_layers
    )
    assert session.current_phase is None


def test_open_session_resume_reflects_turns(manager):
    first = manager.open_session("P_a#4567y", "3")
    manager.handle_user_message(first, "hello")
    resumed = manager.open_session("P_a#4567y", "3")
    assert resumed.session_key == first.session_key
    assert resumed.next_seq == 3
    assert resumed.created_at == first.created_at


def test_open_session_condition_mismatch(manager):
    manager.open_session("P_a#4567y", "3")
    with pytest.raises(ConditionMismatch):
        manager.open_session("P_a#4567y", "2")


def test_open_session_unknown_condition(manager):
    with pytest.raises(UnknownCondition):
        manager.open_session("P_a#4567y", "99")


def test_open_session_bad_participant_id(manager):
    with pytest.raises(InvalidMessage):
        manager.open_session("white space", "3")


# --- advance_phase ------------------------------------------------------------

def test_advance_phase_swaps_layers_and_logs_event(manager, store):
    session = manager.open_session("P_a#4567y", "3")
    advanced = manager.advance_phase(session, "post_timer")
    assert advanced.active_layers == frozenset({"base_persona", "no_poems"})
    assert advanced.current_phase == "post_timer"
    turns = store.list_session_turns(session.session_key)
    assert len(turns) == 1
    assert turns[0].role == "phase_event"
    assert turns[0].content == "post_timer"
    assert turns[0].active_layers_snapshot == ("base_persona", "no_poems")


def test_advance_phase_to_current_is_noop(manager, store):
    session = manager.open_session("P_a#4567y", "3")
    once = manager.advance_phase(session, "post_timer")
    twice = manager.advance_phase(once, "post_timer")
    assert twice == once
    assert store.count_turns(session.session_key) == 1


def test_advance_phase_unknown(manager):
    session = manager.open_session("P_a#4567y", "3")
    with pytest.raises(UnknownPhase):
        manager.advance_phase(session, "nope")


def test_phase_chain_matches_manual_fold(store):
    config = parse_study_config({
        "study_id": "chain",
        "conditions": {"c": {"base_prompt_layers": ["a"]}},
        "layers": {lid: {"text": f"text {lid}", "order_rank": i}
                   for i, lid in enumerate("abcd")},
        "phases": {
            "p1": {"activate": ["b"], "deactivate": []},
            "p2": {"activate": ["c"], "deactivate": ["a"]},
            "p3": {"activate": ["d"], "deactivate": ["b"]},
        },
    })
    manager = SessionManager(config, store, MockBackend())
    session = manager.open_session("p", "c")
    expected = {"a"}
    for phase_id in ("p1", "p2", "p3"):
        session = manager.advance_phase(session, phase_id)
        directive = config.phases[phase_id]
        expected = (expected - set(directive.deactivate)) | set(directive.activate)
    assert session.active_layers == frozenset(expected)
    assert expected == {"b", "c", "d"} - {"b"} | {"d"}  # sanity: fold is {c, d}


# --- build_llm_request -----------------------------------------------------------

def test_build_request_fresh_session(manager, poem_config):
    session = manager.open_session("P_a#4567y", "3")
    request = manager.build_llm_request(session, "hi")
    assert request.messages == (("user", "hi"),)
    assert request.system_prompt == "\n\n".join(
        poem_config.layers[lid].text for lid in ("base_persona", "poem_task")
    )
    assert request.model_name == poem_config.backend.model_name


def test_build_request_after_two_turns(manager, store):
    session = manager.open_session("P_a#4567y", "3")
    manager.handle_user_message(session, "m1")
    manager.handle_user_message(session, "m2")
    request = manager.build_llm_request(session, "m3")
    assert len(request.messages) == 5
    assert request.messages[-1] == ("user", "m3")
    actual = canonical_request_bytes(request)
    expected = oracle_request_bytes(manager.config, store, session.session_key, "3", "m3")
    assert actual == expected


def test_build_request_after_phase_swaps_prompt(manager, poem_config):
    session = manager.open_session("P_a#4567y", "3")
    session = manager.advance_phase(session, "post_timer")
    request = manager.build_llm_request(session, "one more poem please")
    assert poem_config.layers["no_poems"].text in request.system_prompt
    assert poem_config.layers["poem_task"].text not in request.system_prompt


def test_build_request_drops_oldest_pairs_when_over_limit(store, poem_config):
    config = replace(poem_config, limits=replace(poem_config.limits, max_context_messages=3))
    manager = SessionManager(config, store, MockBackend())
    session = manager.open_session("p1", "1")
    replies = {}
    for i in range(3):
        replies[f"m{i}"], _ = manager.handle_user_message(session, f"m{i}")
    request = manager.build_llm_request(session, "m3")
    # 7 candidate messages truncated to 3 by dropping the two oldest pairs
    assert request.messages == (
        ("user", "m2"), ("assistant", replies["m2"]), ("user", "m3"),
    )


def test_build_request_rejects_oversize(manager):
    session = manager.open_session("P_a#4567y", "3")
    with pytest.raises(MessageTooLarge):
        manager.build_llm_request(session, "x" * (manager.config.limits.max_user_message_bytes + 1))


# --- handle_user_message ---------------------------------------------------------

def test_handle_message_mock_oracle(poem_config, store):
    backend = RecordingBackend()
    manager = SessionManager(poem_config, store, backend)
    session = manager.open_session("P_a#4567y", "3")
    reply, seq = manager.handle_user_message(session, "hello")
    assert seq == 2
    assert reply == mock_complete(backend.requests[0]).content
    turns = store.list_session_turns(session.session_key)
    assert [(t.role, t.content) for t in turns] == [("user", "hello"), ("assistant", reply)]


def test_handle_empty_message_rejected_store_unchanged(manager, store):
    session = manager.open_session("P_a#4567y", "3")
    with pytest.raises(InvalidMessage):
        manager.handle_user_message(session, "")
    assert store.count_turns(session.session_key) == 0


def test_turn_limit_blocks_fifth_message(poem_config, store):
    config = replace(poem_config, limits=replace(poem_config.limits, max_turns_per_session=4))
    manager = SessionManager(config, store, MockBackend())
    session = manager.open_session("p1", "1")
    for i in range(4):
        manager.handle_user_message(session, f"m{i}")
    before = store.count_turns(session.session_key)
    with pytest.raises(SessionTurnLimitExceeded):
        manager.handle_user_message(session, "m4")
    assert store.count_turns(session.session_key) == before


def test_backend_failure_keeps_user_turn(poem_config, store):
    manager = SessionManager(poem_config, store, FailingBackend())
    session = manager.open_session("p1", "1")
    with pytest.raises(BackendUnavailable):
        manager.handle_user_message(session, "lost?")
    turns = store.list_session_turns(session.session_key)
    assert [(t.role, t.content) for t in turns] == [("user", "lost?")]


def test_consecutive_user_messages_after_backend_failure(poem_config, store):
    # a failed turn leaves a lone user message; the retry request then carries
    # two consecutive user entries rather than losing the first one
    backend = RecordingBackend()
    manager = SessionManager(poem_config, store, FailingBackend())
    session = manager.open_session("p1", "1")
    with pytest.raises(BackendUnavailable):
        manager.handle_user_message(session, "first try")
    manager.backend = backend
    manager.handle_user_message(manager.open_session("p1", "1"), "second try")
    assert backend.requests[0].messages == (("user", "first try"), ("user", "second try"))


def test_success_adds_exactly_two_turns(manager, store):
    session = manager.open_session("P_a#4567y", "3")
    for i in range(3):
        manager.handle_user_message(session, f"m{i}")
    assert store.count_turns(session.session_key) == 6
    assert store.count_turns(session.session_key, role="user") == 3
    assert store.count_turns(session.session_key, role="assistant") == 3


def test_concurrent_messages_to_one_session_are_serialized(manager, store):
    session = manager.open_session("P_a#4567y", "3")
    errors = []

    def send(i):
        try:
            manager.handle_user_message(session, f"racing-{i}")
        except Exception as exc:  # pragma: no cover - failures collected for the assert
            errors.append(exc)

    threads = [threading.Thread(target=send, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    seqs = [t.seq for t in store.list_session_turns(session.session_key)]
    assert seqs == list(range(1, 9))


# --- post-processing -------------------------------------------------------------

def test_post_process_default_is_identity(manager):
    session = manager.open_session("P_a#4567y", "3")
    assert manager.post_process_response(LLMResponse(content="text"), session) == "text"


def test_post_process_strip_stage(poem_config, store):
    manager = SessionManager(poem_config, store, MockBackend(),
                             post_process=[strip_trailing_whitespace])
    session = manager.open_session("p1", "1")
    assert manager.post_process_response(LLMResponse(content="ok \n"), session) == "ok"
    assert manager.post_process_response(LLMResponse(content="ok \n"), session) == "ok \n".rstrip()


def test_post_process_identity_composition(poem_config, store):
    identity = lambda text, session: text
    manager = SessionManager(poem_config, store, MockBackend(),
                             post_process=[identity, identity])
    session = manager.open_session("p1", "1")
    assert manager.post_process_response(LLMResponse(content="text"), session) == "text"


def test_post_processed_text_is_what_gets_logged(poem_config, store):
    manager = SessionManager(poem_config, store, MockBackend(),
                             post_process=[lambda text, session: text.upper()])
    session = manager.open_session("p1", "1")
    reply, _ = manager.handle_user_message(session, "hi")
    assert reply.endswith(": HI")
    assert store.list_session_turns(session.session_key)[1].content == reply


# --- isolation --------------------------------------------------------------------

def test_no_cross_session_content_in_requests(poem_config, store):
    backend = RecordingBackend()
    manager = SessionManager(poem_config, store, backend)
    sentinels = {pid: f"sentinel-{pid}-{random.getrandbits(32):08x}" for pid in ("pA", "pB")}
    sessions = {pid: manager.open_session(pid, "1") for pid in sentinels}
    for _ in range(3):
        for pid, session in sessions.items():
            manager.handle_user_message(session, f"note {sentinels[pid]}")
    for request in backend.requests:
        blob = canonical_request_bytes(request).decode("utf-8")
        owners = {pid for pid in sentinels if sentinels[pid] in blob}
        assert len(owners) == 1


# --- randomized context-replay property -------------------------------------------

def test_context_replay_matches_oracle_over_random_scripts(poem_config, store):
    rng = random.Random(20260809)
    backend = RecordingBackend()
    manager = SessionManager(poem_config, store, backend)
    phase_ids = sorted(poem_config.phases)

    for index in range(10):
        pid = f"replay{index}"
        cond = rng.choice(sorted(poem_config.conditions))
        session = manager.open_session(pid, cond)
        sent_at_seq = []
        for turn in range(rng.randint(2, 8)):
            if rng.random() < 0.25:
                session = manager.advance_phase(session, rng.choice(phase_ids))
            text = f"s{index} t{turn} {rng.getrandbits(32):08x}"
            before = len(backend.requests)
            _, seq = manager.handle_user_message(session, text)
            sent_at_seq.append((text, seq, backend.requests[before]))
            session = manager.open_session(pid, cond)  # resume between turns

        for text, assistant_seq, request in sent_at_seq:
            actual = canonical_request_bytes(request)
            expected = oracle_request_bytes(
                poem_config, store, session.session_key, cond, text,
                turns_before_seq=assistant_seq - 1,
            )
            assert actual == expected
