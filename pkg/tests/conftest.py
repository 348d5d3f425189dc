from __future__ import annotations

import logging

import pytest

from gridfleet.backends import SimConfig
from gridfleet.tasks import TaskSpec


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    # keep abort/recovery chatter out of test output; tests that assert
    # on log records raise the level themselves via caplog
    logging.getLogger("gridfleet").setLevel(logging.ERROR)
    yield
    logging.getLogger("gridfleet").setLevel(logging.NOTSET)


def small_env(**overrides) -> dict:
    env = {
        "rows": 4,
        "cols": 4,
        "screen_width": 32,
        "screen_height": 32,
        "latency_base_ms": 0.0,
    }
    env.update(overrides)
    return env


def make_task(
    task_id: str = "t-cell",
    *,
    step_limit: int = 25,
    early_stop: bool = False,
    evaluator: dict | None = None,
    **env_overrides,
) -> TaskSpec:
    return TaskSpec(
        task_id=task_id,
        prompt="set the top-left cell to 7",
        evaluator=evaluator or {"kind": "cell_equals", "row": 0, "col": 0, "value": 7},
        domain="office",
        env=small_env(**env_overrides),
        step_limit=step_limit,
        early_stop=early_stop,
    )


@pytest.fixture
def task() -> TaskSpec:
    return make_task()


@pytest.fixture
def sim_config() -> SimConfig:
    return SimConfig.from_dict(small_env())
