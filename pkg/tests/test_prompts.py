from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from surveychat.config import PhaseDirective, parse_study_config
from surveychat.errors import UnknownLayer
from surveychat.prompts import apply_phase, compose_system_prompt

CONFIG = parse_study_config({
    "study_id": "layering",
    "conditions": {"c": {"base_prompt_layers": ["base_persona"]}},
    "layers": {
        "base_persona": {"text": "stay friendly", "order_rank": 10},
        "poem_task": {"text": "help with the poem", "order_rank": 20},
        "no_poems": {"text": "decline poem requests", "order_rank": 30},
        "extra": {"text": "answer briefly", "order_rank": 5},
    },
    "phases": {
        "post_timer": {"activate": ["no_poems"], "deactivate": ["poem_task"]},
        "noop": {"activate": [], "deactivate": []},
    },
})

layer_subsets = st.sets(st.sampled_from(sorted(CONFIG.layers)))
directives = st.builds(
    PhaseDirective,
    phase_id=st.just("generated"),
    activate=st.frozensets(st.sampled_from(sorted(CONFIG.layers))),
    deactivate=st.frozensets(st.sampled_from(sorted(CONFIG.layers))),
)


def test_single_layer_is_verbatim():
    prompt = compose_system_prompt(CONFIG, {"base_persona"})
    assert prompt.text == "stay friendly"
    assert prompt.constituent_layers == ("base_persona",)


def test_two_layers_join_in_rank_order():
    # oracle: sort the (rank, text) pairs by hand and join
    expected = "stay friendly" + "\n\n" + "help with the poem"
    prompt = compose_system_prompt(CONFIG, {"base_persona", "poem_task"})
    assert prompt.text == expected
    assert prompt.constituent_layers == ("base_persona", "poem_task")


def test_insertion_order_is_irrelevant():
    first = compose_system_prompt(CONFIG, ["poem_task", "base_persona"])
    second = compose_system_prompt(CONFIG, ["base_persona", "poem_task"])
    assert first == second


def test_unknown_layer_raises():
    with pytest.raises(UnknownLayer):
        compose_system_prompt(CONFIG, {"base_persona", "ghost"})


def test_phase_swap():
    directive = CONFIG.phases["post_timer"]
    result = apply_phase({"base_persona", "poem_task"}, directive)
    assert result == frozenset({"base_persona", "no_poems"})


def test_empty_directive_is_identity():
    active = frozenset({"base_persona", "poem_task"})
    assert apply_phase(active, CONFIG.phases["noop"]) == active


def test_input_set_is_not_mutated():
    active = {"base_persona", "poem_task"}
    apply_phase(active, CONFIG.phases["post_timer"])
    assert active == {"base_persona", "poem_task"}


@given(active=layer_subsets, directive=directives)
def test_apply_phase_is_idempotent(active, directive):
    once = apply_phase(active, directive)
    assert apply_phase(once, directive) == once


@given(active=layer_subsets)
def test_compose_is_deterministic_and_rank_ordered(active):
    first = compose_system_prompt(CONFIG, active)
    second = compose_system_prompt(CONFIG, frozenset(active))
    assert first.text == second.text
    ranks = [CONFIG.layers[lid].order_rank for lid in first.constituent_layers]
    assert ranks == sorted(ranks)


@given(active=layer_subsets,
       sequence=st.lists(st.sampled_from(sorted(CONFIG.phases)), max_size=6))
def test_rank_order_survives_any_phase_history(active, sequence):
    state = frozenset(active)
    for phase_id in sequence:
        state = apply_phase(state, CONFIG.phases[phase_id])
    prompt = compose_system_prompt(CONFIG, state)
    ranks = [CONFIG.layers[lid].order_rank for lid in prompt.constituent_layers]
    assert ranks == sorted(ranks)
    assert set(prompt.constituent_layers) == set(state)
