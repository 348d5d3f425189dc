"""Policies for the rollout driver.

A policy is anything with ``act(states) -> actions``: one action dict per
input state, same order, every action passing ``validate_action``.
"""

from __future__ import annotations

import random
import string
from typing import Any, Protocol, Sequence

from .dataloader import BatchedState
from .wire import validate_action


class Policy(Protocol):
    def act(self, states: Sequence[BatchedState]) -> list[dict[str, Any]]: ...


class RandomPolicy:
    """Seeded random actions drawn from kinds that are always legal
    regardless of screen geometry, so episodes close by step limit (or by
    accidentally satisfying an early-stop task)."""

    def __init__(self, seed: int = 0) -> None:
        self._rng = random.Random(seed)

    def act(self, states: Sequence[BatchedState]) -> list[dict[str, Any]]:
        actions = []
        for _ in states:
            roll = self._rng.randrange(4)
            if roll == 0:
                action = {"kind": "noop", "payload": {}}
            elif roll == 1:
                action = {
                    "kind": "scroll",
                    "payload": {
                        "dx": self._rng.randint(-3, 3),
                        "dy": self._rng.randint(-3, 3),
                    },
                }
            elif roll == 2:
                action = {
                    "kind": "key_press",
                    "payload": {"key": self._rng.choice(string.ascii_lowercase)},
                }
            else:
                action = {
                    "kind": "type_text",
                    "payload": {
                        "text": "".join(
                            self._rng.choices(string.ascii_lowercase, k=3)
                        )
                    },
                }
            actions.append(validate_action(action))
        return actions


class ScriptedPolicy:
    """Plays a fixed per-task action script, indexed by how many steps the
    episode has taken.  Past the end of a script it idles with noop;
    early-stop tasks end before that happens."""

    def __init__(self, scripts: dict[str, list[dict[str, Any]]]) -> None:
        for task_id, script in scripts.items():
            if not script:
                raise ValueError(f"empty script for {task_id!r}")
            for action in script:
                validate_action(action)
        self.scripts = scripts

    def act(self, states: Sequence[BatchedState]) -> list[dict[str, Any]]:
        actions = []
        for state in states:
            script = self.scripts.get(state.task_id or "")
            if script is None:
                raise KeyError(f"no script for task {state.task_id!r}")
            if state.steps_taken < len(script):
                actions.append(script[state.steps_taken])
            else:
                actions.append({"kind": "noop", "payload": {}})
        return actions


def solved_header_row_script() -> list[dict[str, Any]]:
    """Three cell writes that satisfy the stock header-row task."""
    return [
        {"kind": "api_call", "payload": {"name": "set_cell", "args": {"row": 0, "col": c, "value": 7}}}
        for c in range(3)
    ]
