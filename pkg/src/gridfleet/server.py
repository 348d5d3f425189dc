"""Centralized batched data server.

One :class:`DataServer` fronts a fleet of replica managers.  It owns
the durable trajectory store, assigns episodes to replicas, runs steps
asynchronously on a shared worker pool, and hands completed steps back
to callers in batches.

The asynchronous core: ``async_step`` validates, files a ticket, and
returns immediately; a pool worker executes the step (which blocks for
the environment's latency), appends the turn to the store, resolves
the ticket, and pushes the outcome onto a FIFO ready queue that
``next_batch`` drains exactly once.  Each replica holds at most one
in-flight step (a depth-1 pending slot); a second submission is
refused with ``REPLICA_BUSY`` rather than queued, which keeps
scheduling decisions in the caller where the policy lives.

A health poller watches every registered replica so crashes that
happen between steps still abort their episodes promptly.  Episode
accounting is conservative by construction: every episode opened is
eventually closed exactly once, as COMPLETE, TRUNCATED, or ABORTED.
"""

from __future__ import annotations

import logging
import queue
import re
import threading
import time
import uuid
from collections import deque
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Any, Mapping

from .manager import ManagerClient
from .protocol import (
    Action,
    EpisodeStatus,
    ErrorCode,
    HealthReport,
    ProtocolError,
    ReplicaState,
    validate_action,
)
from .store import EpisodeWriter, TrajectoryStore
from .tasks import TaskSpec

logger = logging.getLogger(__name__)

REPLICA_ID_PATTERN = r"^mgr-[A-Za-z0-9_.-]+-[0-9]+$"
_REPLICA_ID_RE = re.compile(REPLICA_ID_PATTERN)

# a replica whose health has not been heard for this many poll
# intervals is treated as unavailable
STALE_POLL_FACTOR = 3.0


def _now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class _Episode:
    episode_id: str
    task: TaskSpec
    writer: EpisodeWriter
    episode_seed: int
    started_at_ms: int
    pending_obs_ref: str
    next_index: int = 0
    last_reward: float = 0.0
    closed: bool = False


@dataclass
class _Replica:
    client: ManagerClient
    replica_id: str
    registered_at_ms: int
    last_report: HealthReport | None = None
    last_poll_ok: float = 0.0
    episodes_assigned: int = 0
    pending_ticket: str | None = None
    resetting: bool = False
    configured_task_id: str | None = None
    episode: _Episode | None = None
    episode_started_mono: float = 0.0


@dataclass
class _Ticket:
    ticket_id: str
    replica_id: str
    created_at: float
    status: str = "pending"  # pending | done | error
    outcome: dict[str, Any] | None = None
    resolved_at: float | None = None


class DataServer:
    """Batched asynchronous front end over a fleet of replica managers."""

    def __init__(
        self,
        store: TrajectoryStore,
        tasks: Mapping[str, TaskSpec],
        *,
        max_workers: int = 1024,
        poll_interval_ms: float = 200.0,
        metrics_window_s: float = 60.0,
        ticket_ttl_s: float = 120.0,
    ):
        self.store = store
        self.tasks = dict(tasks)
        self.poll_interval_ms = poll_interval_ms
        self.metrics_window_s = metrics_window_s
        self.ticket_ttl_s = ticket_ttl_s

        self._instance = uuid.uuid4().hex[:8]
        self._lock = threading.RLock()
        self._replicas: dict[str, _Replica] = {}
        self._tickets: dict[str, _Ticket] = {}
        self._ticket_seq = 0
        self._episode_seq = 0
        self._seed_seq = 0

        self._ready: queue.Queue[dict[str, Any]] = queue.Queue()
        self._executor = ThreadPoolExecutor(
            max_workers=max_workers, thread_name_prefix="step"
        )

        # sliding-window event clocks for throughput metrics
        self._step_events: deque[float] = deque()
        self._traj_events: deque[float] = deque()
        self._steps_total = 0
        self._episodes_total = 0
        self._episodes_by_status = {s.value: 0 for s in EpisodeStatus}
        # conservation counters: every ticket issued must resolve once
        self._tickets_issued = 0
        self._tickets_ok = 0
        self._tickets_error = 0

        self._closing = threading.Event()
        self._poller = threading.Thread(
            target=self._poll_loop, name="health-poller", daemon=True
        )
        self._poller.start()

    # -- registry -----------------------------------------------------

    def register(self, client: ManagerClient) -> dict[str, Any]:
        replica_id = client.replica_id
        if not _REPLICA_ID_RE.match(replica_id):
            raise ProtocolError(
                ErrorCode.MALFORMED_MESSAGE,
                f"replica id {replica_id!r} does not match {REPLICA_ID_PATTERN}",
            )
        with self._lock:
            if replica_id in self._replicas:
                raise ProtocolError(
                    ErrorCode.MALFORMED_MESSAGE,
                    f"replica {replica_id!r} is already registered",
                )
            entry = _Replica(
                client=client, replica_id=replica_id, registered_at_ms=_now_ms()
            )
            self._replicas[replica_id] = entry
        self._probe(entry)
        with self._lock:
            return {"replica_id": replica_id, "registered": len(self._replicas)}

    def unregister(self, replica_id: str) -> dict[str, Any]:
        with self._lock:
            entry = self._replicas.pop(replica_id, None)
            if entry is None:
                raise ProtocolError(
                    ErrorCode.UNKNOWN_REPLICA, f"unknown replica {replica_id!r}"
                )
            self._abort_episode_locked(entry, reason="replica unregistered")
            return {"replica_id": replica_id, "registered": len(self._replicas)}

    def list_replicas(self) -> list[dict[str, Any]]:
        now = time.monotonic()
        with self._lock:
            out = []
            for rid in sorted(self._replicas):
                entry = self._replicas[rid]
                report = entry.last_report
                out.append(
                    {
                        "replica_id": rid,
                        "available": self._available_locked(entry, now),
                        "state": report.state.value if report else None,
                        "task_id": entry.configured_task_id,
                        "episode_id": entry.episode.episode_id if entry.episode else None,
                        "pending_ticket": entry.pending_ticket,
                        "episodes_assigned": entry.episodes_assigned,
                        "crash_count": report.crash_count if report else 0,
                    }
                )
            return out

    def _available_locked(self, entry: _Replica, now: float) -> bool:
        report = entry.last_report
        if report is None:
            return False
        if report.state in (ReplicaState.CRASHED, ReplicaState.RECOVERING):
            return False
        horizon = STALE_POLL_FACTOR * self.poll_interval_ms / 1000.0
        return (now - entry.last_poll_ok) <= horizon

    # -- episode assignment -------------------------------------------

    def batch_reset(
        self,
        task_id: str,
        count: int,
        seeds: list[int] | None = None,
    ) -> dict[str, Any]:
        """Assign ``count`` idle replicas to ``task_id`` and reset them.

        Idle available replicas with the fewest assigned episodes are
        picked first, which keeps assignment counts within one across a
        uniform fleet.  Returns per-replica episode handles plus a
        failure list for replicas that died during the reset.
        """
        task = self.tasks.get(task_id)
        if task is None:
            raise ProtocolError(ErrorCode.UNKNOWN_TASK, f"unknown task {task_id!r}")
        if count < 1:
            raise ProtocolError(ErrorCode.MALFORMED_MESSAGE, "count must be positive")
        if seeds is not None and len(seeds) != count:
            raise ProtocolError(
                ErrorCode.MALFORMED_MESSAGE, "seeds must match count one to one"
            )
        now = time.monotonic()
        with self._lock:
            idle = [
                e
                for e in self._replicas.values()
                if e.episode is None
                and not e.resetting
                and e.pending_ticket is None
                and self._available_locked(e, now)
            ]
            if len(idle) < count:
                raise ProtocolError(
                    ErrorCode.REPLICA_BUSY,
                    f"need {count} idle replicas, only {len(idle)} available",
                    {"available": len(idle)},
                )
            idle.sort(key=lambda e: (e.episodes_assigned, e.replica_id))
            chosen = idle[:count]
            plan: list[tuple[_Replica, int, str]] = []
            for i, entry in enumerate(chosen):
                if seeds is not None:
                    seed = seeds[i]
                else:
                    self._seed_seq += 1
                    seed = self._seed_seq
                self._episode_seq += 1
                episode_id = f"ep-{self._instance}-{self._episode_seq:06d}"
                entry.resetting = True
                entry.episodes_assigned += 1
                plan.append((entry, seed, episode_id))

        futures = [
            self._executor.submit(self._do_reset, entry, task, seed, episode_id)
            for entry, seed, episode_id in plan
        ]
        wait(futures)
        items: list[dict[str, Any]] = []
        failures: list[dict[str, Any]] = []
        for fut in futures:
            outcome = fut.result()
            (items if "error" not in outcome else failures).append(outcome)
        items.sort(key=lambda d: d["replica_id"])
        return {"task_id": task_id, "items": items, "failures": failures}

    def _do_reset(
        self, entry: _Replica, task: TaskSpec, seed: int, episode_id: str
    ) -> dict[str, Any]:
        try:
            if entry.configured_task_id != task.task_id:
                entry.client.configure(task)
                with self._lock:
                    entry.configured_task_id = task.task_id
            obs, info = entry.client.reset(seed)
            ref = self.store.put_blob(obs.screenshot)
            started = _now_ms()
            writer = self.store.create_episode(episode_id)
            writer.write_open(
                task_id=task.task_id,
                replica_id=entry.replica_id,
                domain=task.domain,
                episode_seed=seed,
                started_at_ms=started,
                first_observation_ref=ref,
            )
            with self._lock:
                entry.episode = _Episode(
                    episode_id=episode_id,
                    task=task,
                    writer=writer,
                    episode_seed=seed,
                    started_at_ms=started,
                    pending_obs_ref=ref,
                )
                entry.episode_started_mono = time.monotonic()
                entry.resetting = False
            return {
                "replica_id": entry.replica_id,
                "episode_id": episode_id,
                "episode_seed": seed,
                "observation_ref": ref,
                "observation": obs.to_wire(),
                "reset_latency_ms": info.get("latency_ms"),
            }
        except ProtocolError as err:
            with self._lock:
                entry.resetting = False
            return {"replica_id": entry.replica_id, "error": err.to_wire()}
        except Exception as exc:  # never leak a worker
            logger.exception("reset of %s failed", entry.replica_id)
            with self._lock:
                entry.resetting = False
            return {
                "replica_id": entry.replica_id,
                "error": {
                    "code": ErrorCode.REPLICA_CRASHED.value,
                    "message": f"reset failed: {exc}",
                },
            }

    # -- asynchronous stepping ----------------------------------------

    def async_step(
        self, replica_id: str, action: Action | Mapping[str, Any], thought: str | None = None
    ) -> dict[str, Any]:
        """File a step and return a ticket without waiting for the result."""
        if not isinstance(action, Action):
            action = Action.from_wire(action)
            if thought is None:
                thought = action.thought
        validate_action(action)
        now = time.monotonic()
        with self._lock:
            entry = self._replicas.get(replica_id)
            if entry is None:
                raise ProtocolError(
                    ErrorCode.UNKNOWN_REPLICA, f"unknown replica {replica_id!r}"
                )
            if not self._available_locked(entry, now):
                report = entry.last_report
                if report is not None and report.state == ReplicaState.RECOVERING:
                    raise ProtocolError(
                        ErrorCode.REPLICA_RECOVERING, f"{replica_id} is recovering"
                    )
                raise ProtocolError(
                    ErrorCode.REPLICA_CRASHED, f"{replica_id} is unavailable"
                )
            if entry.pending_ticket is not None:
                raise ProtocolError(
                    ErrorCode.REPLICA_BUSY,
                    f"{replica_id} already has an in-flight step",
                    {"ticket": entry.pending_ticket},
                )
            if entry.episode is None or entry.episode.closed:
                raise ProtocolError(
                    ErrorCode.EPISODE_DONE, f"{replica_id} has no active episode"
                )
            self._ticket_seq += 1
            ticket_id = f"t-{self._instance}-{self._ticket_seq:08d}"
            entry.pending_ticket = ticket_id
            self._tickets[ticket_id] = _Ticket(
                ticket_id=ticket_id, replica_id=replica_id, created_at=now
            )
            self._tickets_issued += 1
        self._executor.submit(self._run_step, ticket_id, entry, action, thought)
        return {"ticket": ticket_id, "replica_id": replica_id}

    def _run_step(
        self, ticket_id: str, entry: _Replica, action: Action, thought: str | None
    ) -> None:
        try:
            try:
                result = entry.client.step(action)
            except ProtocolError as err:
                aborted = err.code in (ErrorCode.REPLICA_CRASHED, ErrorCode.TIMEOUT)
                with self._lock:
                    episode = entry.episode
                    episode_id = episode.episode_id if episode else None
                    if aborted:
                        self._abort_episode_locked(entry, reason=f"step failed: {err.code.value}")
                    outcome = {
                        "ticket": ticket_id,
                        "replica_id": entry.replica_id,
                        "episode_id": episode_id,
                        "error": err.to_wire(),
                        "aborted": aborted,
                    }
                    self._resolve_locked(ticket_id, entry, outcome, status="error")
                self._ready.put(outcome)
                return

            new_ref = self.store.put_blob(result.observation.screenshot)
            ts = _now_ms()
            with self._lock:
                ep = entry.episode
                if ep is None or ep.closed:
                    # aborted while the step was in flight; the result
                    # has nowhere to land
                    outcome = {
                        "ticket": ticket_id,
                        "replica_id": entry.replica_id,
                        "episode_id": ep.episode_id if ep else None,
                        "error": {
                            "code": ErrorCode.EPISODE_DONE.value,
                            "message": "episode was aborted while the step ran",
                        },
                        "aborted": True,
                    }
                    self._resolve_locked(ticket_id, entry, outcome, status="error")
                    self._ready.put(outcome)
                    return
                index = ep.next_index
                prev_ref = ep.pending_obs_ref
                ep.next_index += 1
                ep.pending_obs_ref = new_ref
                ep.last_reward = result.reward
                ep.writer.append_turn(
                    index=index,
                    observation_ref=prev_ref,
                    action=action.to_wire(),
                    reward=result.reward,
                    latency_ms=result.info.get("latency_ms", 0.0),
                    timestamp_ms=ts,
                    thought=thought,
                )
                outcome = {
                    "ticket": ticket_id,
                    "replica_id": entry.replica_id,
                    "episode_id": ep.episode_id,
                    "turn": index,
                    "observation": result.observation.to_wire(),
                    "observation_ref": new_ref,
                    "reward": result.reward,
                    "done": result.done,
                    "info": result.info,
                }
                if result.done:
                    status = EpisodeStatus(result.info.get("status", "TRUNCATED"))
                    self._close_episode_locked(entry, status, result.reward, new_ref)
                self._record_step_locked()
                self._resolve_locked(ticket_id, entry, outcome, status="done")
            self._ready.put(outcome)
        except Exception:
            logger.exception("step worker for %s failed", entry.replica_id)
            with self._lock:
                outcome = {
                    "ticket": ticket_id,
                    "replica_id": entry.replica_id,
                    "episode_id": entry.episode.episode_id if entry.episode else None,
                    "error": {
                        "code": ErrorCode.REPLICA_CRASHED.value,
                        "message": "internal step failure",
                    },
                    "aborted": False,
                }
                self._resolve_locked(ticket_id, entry, outcome, status="error")
            self._ready.put(outcome)

    def _resolve_locked(
        self, ticket_id: str, entry: _Replica, outcome: dict[str, Any], status: str
    ) -> None:
        ticket = self._tickets.get(ticket_id)
        if ticket is not None:
            ticket.status = status
            ticket.outcome = outcome
            ticket.resolved_at = time.monotonic()
            if status == "error":
                self._tickets_error += 1
            else:
                self._tickets_ok += 1
        if entry.pending_ticket == ticket_id:
            entry.pending_ticket = None

    # -- consuming results --------------------------------------------

    def next_batch(self, max_items: int = 64, timeout_ms: float = 1000.0) -> list[dict[str, Any]]:
        """Dequeue up to ``max_items`` completed outcomes, FIFO, exactly once.

        Blocks up to ``timeout_ms`` for the first item, then drains
        whatever else is immediately ready.
        """
        if max_items < 1:
            raise ProtocolError(ErrorCode.MALFORMED_MESSAGE, "max_items must be positive")
        items: list[dict[str, Any]] = []
        try:
            items.append(self._ready.get(timeout=max(timeout_ms, 0.0) / 1000.0))
        except queue.Empty:
            return items
        while len(items) < max_items:
            try:
                items.append(self._ready.get_nowait())
            except queue.Empty:
                break
        return items

    def poll(self, ticket_id: str) -> dict[str, Any]:
        with self._lock:
            ticket = self._tickets.get(ticket_id)
            if ticket is None:
                raise ProtocolError(
                    ErrorCode.UNKNOWN_TICKET, f"unknown ticket {ticket_id!r}"
                )
            out: dict[str, Any] = {
                "ticket": ticket_id,
                "replica_id": ticket.replica_id,
                "status": ticket.status,
            }
            if ticket.outcome is not None:
                out["outcome"] = ticket.outcome
            return out

    # -- store access -------------------------------------------------

    def get_trajectory(self, episode_id: str) -> dict[str, Any]:
        rec = self.store.read_episode(episode_id)
        return {
            "episode_id": rec.episode_id,
            "task_id": rec.task_id,
            "replica_id": rec.replica_id,
            "domain": rec.domain,
            "episode_seed": rec.episode_seed,
            "started_at_ms": rec.started_at_ms,
            "ended_at_ms": rec.ended_at_ms,
            "status": rec.status,
            "final_reward": rec.final_reward,
            "first_observation_ref": rec.first_observation_ref,
            "final_observation_ref": rec.final_observation_ref,
            "turns": [
                {
                    "index": t.index,
                    "observation_ref": t.observation_ref,
                    "action": t.action,
                    "reward": t.reward,
                    "latency_ms": t.latency_ms,
                    "timestamp_ms": t.timestamp_ms,
                    "thought": t.thought,
                }
                for t in rec.turns
            ],
        }

    def query_trajectories(
        self,
        *,
        task_id: str | None = None,
        domain: str | None = None,
        status: str | None = None,
        min_reward: float | None = None,
        since_ms: int | None = None,
        limit: int | None = None,
    ) -> list[dict[str, Any]]:
        records = self.store.query(
            task_id=task_id,
            domain=domain,
            status=status,
            min_reward=min_reward,
            since_ms=since_ms,
            limit=limit,
        )
        return [
            {
                "episode_id": r.episode_id,
                "task_id": r.task_id,
                "replica_id": r.replica_id,
                "domain": r.domain,
                "status": r.status,
                "final_reward": r.final_reward,
                "turns": len(r.turns),
                "started_at_ms": r.started_at_ms,
                "ended_at_ms": r.ended_at_ms,
            }
            for r in records
        ]

    # -- metrics ------------------------------------------------------

    def _record_step_locked(self) -> None:
        self._steps_total += 1
        self._step_events.append(time.monotonic())

    def _rate(self, events: deque[float], now: float) -> float:
        cutoff = now - self.metrics_window_s
        while events and events[0] < cutoff:
            events.popleft()
        if len(events) < 2:
            return 0.0
        span = events[-1] - events[0]
        if span <= 0:
            return 0.0
        return (len(events) - 1) / span

    def metrics(self) -> dict[str, Any]:
        now = time.monotonic()
        with self._lock:
            steps_per_sec = self._rate(self._step_events, now)
            trajs_per_sec = self._rate(self._traj_events, now)
            available = sum(
                1 for e in self._replicas.values() if self._available_locked(e, now)
            )
            active = sum(1 for e in self._replicas.values() if e.episode is not None)
            pending = sum(
                1 for t in self._tickets.values() if t.status == "pending"
            )
            return {
                "steps_per_sec": steps_per_sec,
                "trajectories_per_min": trajs_per_sec * 60.0,
                "window_s": self.metrics_window_s,
                "steps_total": self._steps_total,
                "episodes_total": self._episodes_total,
                "episodes_by_status": dict(self._episodes_by_status),
                "replicas_registered": len(self._replicas),
                "replicas_available": available,
                "episodes_active": active,
                "queue_depth": self._ready.qsize(),
                "tickets_pending": pending,
                "tickets_issued": self._tickets_issued,
                "tickets_ok": self._tickets_ok,
                "tickets_error": self._tickets_error,
            }

    # -- episode closure ----------------------------------------------

    def _close_episode_locked(
        self,
        entry: _Replica,
        status: EpisodeStatus,
        final_reward: float,
        final_ref: str | None,
    ) -> None:
        ep = entry.episode
        if ep is None or ep.closed:
            return
        ep.closed = True
        ep.writer.close(
            status=status,
            final_reward=final_reward,
            final_observation_ref=final_ref,
            ended_at_ms=_now_ms(),
        )
        entry.episode = None
        self._episodes_total += 1
        self._episodes_by_status[status.value] += 1
        if status != EpisodeStatus.ABORTED:
            self._traj_events.append(time.monotonic())

    def _abort_episode_locked(self, entry: _Replica, reason: str) -> None:
        ep = entry.episode
        if ep is None or ep.closed:
            return
        logger.warning(
            "aborting episode %s on %s: %s", ep.episode_id, entry.replica_id, reason
        )
        self._close_episode_locked(
            entry, EpisodeStatus.ABORTED, ep.last_reward, ep.pending_obs_ref
        )

    # -- health polling -----------------------------------------------

    def _probe(self, entry: _Replica) -> None:
        fetched_at = time.monotonic()
        try:
            report = entry.client.health()
        except Exception as exc:
            logger.debug("health probe of %s failed: %s", entry.replica_id, exc)
            return
        with self._lock:
            entry.last_report = report
            entry.last_poll_ok = time.monotonic()
            if entry.pending_ticket is not None or entry.resetting:
                # a crash during a step or reset surfaces through that
                # operation's own error path
                return
            if fetched_at < entry.episode_started_mono:
                # the report predates the current episode and says
                # nothing about it
                return
            crashed = report.state in (ReplicaState.CRASHED, ReplicaState.RECOVERING)
            # a replica can crash and self-recover entirely between two
            # polls; the manager having dropped the episode is the trace
            # that leaves behind
            silently_dropped = entry.episode is not None and not report.episode_active
            if crashed or silently_dropped:
                self._abort_episode_locked(
                    entry,
                    reason=(
                        f"health poll saw {report.state.value}"
                        if crashed
                        else "episode lost to a crash-recovery cycle"
                    ),
                )

    def _poll_loop(self) -> None:
        interval_s = self.poll_interval_ms / 1000.0
        while not self._closing.wait(interval_s):
            with self._lock:
                entries = list(self._replicas.values())
            for entry in entries:
                self._probe(entry)
            self._prune_tickets()

    def _prune_tickets(self) -> None:
        horizon = time.monotonic() - self.ticket_ttl_s
        with self._lock:
            dead = [
                tid
                for tid, t in self._tickets.items()
                if t.status != "pending"
                and t.resolved_at is not None
                and t.resolved_at < horizon
            ]
            for tid in dead:
                del self._tickets[tid]

    # -- lifecycle ----------------------------------------------------

    def close(self) -> None:
        """Shut down: stop polling, drain workers, abort open episodes."""
        self._closing.set()
        self._executor.shutdown(wait=True)
        with self._lock:
            for entry in self._replicas.values():
                self._abort_episode_locked(entry, reason="server shutdown")
        self._poller.join(timeout=2.0)

    def warm_up(self) -> None:
        """Pre-spawn one pool worker per registered replica.

        Lazily spawned workers cost tens of microseconds on first use;
        benchmarks call this once so measured submission times reflect
        steady state.
        """
        with self._lock:
            n = len(self._replicas)
        barrier = threading.Barrier(n + 1)

        def _hold() -> None:
            barrier.wait(timeout=10.0)

        futures = [self._executor.submit(_hold) for _ in range(n)]
        barrier.wait(timeout=10.0)
        wait(futures)

    def __enter__(self) -> "DataServer":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()
