"""Reference rollout driver.

Runs the canonical loop against a data server: drain completed states,
ask the policy for a batch of actions, file them asynchronously, weave
episode resets in at the boundaries.  Nothing in the loop ever waits for
an individual step to finish; replica failures surface as per-item
outcomes and are counted, not raised.
"""

from __future__ import annotations

import time
from itertools import cycle
from typing import Any, Sequence

from .dataloader import BatchedState, DataloaderHandle
from .policies import Policy
from .wire import EngineError, ValidationError

_BUSY = "REPLICA_BUSY"


def rollout(
    handle: DataloaderHandle,
    policy: Policy,
    episodes: int,
    tasks: Sequence[str],
    *,
    max_wall_s: float = 600.0,
) -> dict[str, Any]:
    """Drive ``episodes`` episodes spread round-robin over ``tasks``.

    Returns a summary once every started episode has closed:
    ``episodes_closed`` split into complete/truncated/aborted,
    ``mean_final_score`` over the closed set (a missing final score
    counts as 0.0), and ``trajectories_per_min`` computed from the span
    between the first and last close, matching the server's rate
    convention.
    """
    if episodes < 1:
        raise ValidationError("episodes must be positive")
    if not tasks:
        raise ValidationError("tasks must not be empty")

    task_cycle = cycle(tasks)
    episode_task: dict[str, str] = {}
    closed_ids: set[str] = set()
    pending: list[str] = []  # task ids for episodes not yet started
    started = 0
    first_close: float | None = None
    last_close: float | None = None
    steps_total = 0
    t0 = time.monotonic()

    # "available" means healthy and reachable, not necessarily idle; the
    # reset path below settles how many are actually free
    healthy = sum(1 for r in handle.replicas() if r.get("available"))
    if healthy == 0:
        raise RuntimeError("no healthy replicas to roll out on")
    for _ in range(min(episodes, healthy)):
        pending.append(next(task_cycle))

    def flush_pending() -> list[BatchedState]:
        nonlocal started
        fresh: list[BatchedState] = []
        while pending:
            task_id = pending[0]
            count = sum(1 for t in pending if t == task_id)
            try:
                states, failures = handle.batch_reset(task_id, count)
            except EngineError as err:
                if err.code != _BUSY:
                    raise
                avail = err.detail.get("available", 0)
                if not isinstance(avail, int) or avail < 1:
                    return fresh  # nothing idle right now; retry after a drain
                try:
                    states, failures = handle.batch_reset(task_id, avail)
                except EngineError:
                    return fresh
            granted = len(states) + len(failures)
            removed = 0
            for i in range(len(pending) - 1, -1, -1):
                if pending[i] == task_id and removed < granted:
                    del pending[i]
                    removed += 1
            for _ in failures:
                pending.append(task_id)  # replica died mid-reset; try again
            for s in states:
                if s.ok and s.episode_id:
                    episode_task[s.episode_id] = task_id
                    fresh.append(s)
                    started += 1
                else:
                    pending.append(task_id)
        return fresh

    def note_close(episode_id: str) -> None:
        nonlocal first_close, last_close
        if episode_id in closed_ids:
            return
        closed_ids.add(episode_id)
        now = time.monotonic()
        if first_close is None:
            first_close = now
        last_close = now
        if started < episodes:
            pending.append(next(task_cycle))

    live = flush_pending()
    last_progress = time.monotonic()
    while len(closed_ids) < episodes:
        now = time.monotonic()
        if now - t0 > max_wall_s:
            raise RuntimeError(
                f"rollout deadline: {len(closed_ids)}/{episodes} closed after {max_wall_s}s"
            )
        if not live and not handle.open_tickets and now - last_progress > 10.0:
            # nothing running and nothing startable; the fleet is held by
            # episodes this loop does not own, so spinning cannot help
            raise RuntimeError(
                f"rollout stalled: {len(closed_ids)}/{episodes} closed, no idle replicas"
            )
        if live:
            for s in live:
                if s.task_id is None:
                    s.task_id = episode_task.get(s.episode_id or "")
            actions = policy.act(live)
            if len(actions) != len(live):
                raise ValidationError("policy returned a mismatched batch")
            handle.async_step([(s.replica_id, a) for s, a in zip(live, actions)])
        drained = handle.next(max_items=max(handle.batch_size, len(live) or 1))
        if drained:
            last_progress = time.monotonic()
        live = []
        for s in drained:
            eid = s.episode_id
            if eid is None or eid not in episode_task:
                continue  # stray outcome from another client of this server
            if s.error is not None:
                note_close(eid)  # aborted server-side; recovery is not ours to wait on
                continue
            steps_total += 1
            if s.done:
                note_close(eid)
            else:
                live.append(s)
        live.extend(flush_pending())

    wall = time.monotonic() - t0
    rows = {r["episode_id"]: r for r in handle.query() if r["episode_id"] in episode_task}
    complete = sum(1 for r in rows.values() if r.get("status") == "COMPLETE")
    truncated = sum(1 for r in rows.values() if r.get("status") == "TRUNCATED")
    aborted = sum(1 for r in rows.values() if r.get("status") == "ABORTED")
    scores = [float(r.get("final_reward") or 0.0) for r in rows.values()]
    if len(closed_ids) >= 2 and last_close is not None and first_close is not None and last_close > first_close:
        rate = (len(closed_ids) - 1) * 60.0 / (last_close - first_close)
    else:
        rate = 0.0
    return {
        "episodes_closed": len(closed_ids),
        "episodes_complete": complete,
        "episodes_truncated": truncated,
        "episodes_aborted": aborted,
        "mean_final_score": sum(scores) / len(scores) if scores else 0.0,
        "trajectories_per_min": rate,
        "steps_total": steps_total,
        "wall_time_s": wall,
    }
