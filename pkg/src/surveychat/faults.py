"""Crash-injection points for durability testing.

When SURVEYCHAT_FAULT_HOOK names a fault point, reaching that point kills
the process immediately (no cleanup, no flush), simulating a hard crash at
exactly that moment. Never set in production.
"""

from __future__ import annotations

import logging
import os

FAULT_ENV = "SURVEYCHAT_FAULT_HOOK"

AFTER_USER_TURN_APPEND = "after_user_turn_append"

logger = logging.getLogger("surveychat.faults")


def fault_point(name: str) -> None:
    if os.environ.get(FAULT_ENV) == name:
        logger.error("fault hook %r tripped; dying now", name)
        os._exit(70)
