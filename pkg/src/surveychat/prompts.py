"""System-prompt composition from layered fragments.

The effective system prompt is assembled from whichever layers are active
for a session. Composition is a pure function: layers are sorted by their
order_rank and joined with a blank line, so the same active set always
yields byte-identical text no matter how the set was reached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .config import PhaseDirective, StudyConfig
from .errors import UnknownLayer

LAYER_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class ComposedPrompt:
    text: str
    constituent_layers: tuple[str, ...]


def compose_system_prompt(config: StudyConfig, active: Iterable[str]) -> ComposedPrompt:
    """Join the active layers' texts in order_rank order."""
    active_set = frozenset(active)
    missing = [lid for lid in active_set if lid not in config.layers]
    if missing:
        raise UnknownLayer(
            f"layers not defined in study {config.study_id!r}: {', '.join(sorted(missing))}"
        )
    ordered = sorted(active_set, key=lambda lid: config.layers[lid].order_rank)
    text = LAYER_SEPARATOR.join(config.layers[lid].text for lid in ordered)
    return ComposedPrompt(text=text, constituent_layers=tuple(ordered))


def apply_phase(active: Iterable[str], directive: PhaseDirective) -> frozenset[str]:
    """Return the layer set after a phase directive; the input is untouched.

    Activating an already-active layer and deactivating an inactive one are
    both no-ops, which makes any directive idempotent.
    """
    return (frozenset(active) - directive.deactivate) | directive.activate
