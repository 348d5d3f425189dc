"""Per-replica state manager.

One :class:`ReplicaManager` owns one environment replica end to end:
it tracks the replica's lifecycle state machine, serializes public
operations, measures per-step latency, scores steps against the
configured task's evaluator, and runs a watchdog thread that detects
hangs and dead backends and drives automatic recovery.  Managers are
deliberately decentralized: each stands alone, so one wedged replica
never stalls its siblings.

Blocking is pushed to the edges.  A caller whose operation cannot
start immediately gets ``REPLICA_BUSY`` (or the crash/recovery
variant) right away instead of queueing; ``health`` never blocks.

Concurrency model: public operations serialize on a non-blocking op
lock; the watchdog and recovery threads do not take that lock (a hung
step holds it), so every state transition is a compare-and-set under a
small state lock and operations re-check after each one.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from typing import Any, Callable, Mapping

from .backends import BackendCrashed, EnvironmentBackend, GridSimBackend, SimConfig
from .protocol import (
    Action,
    ErrorCode,
    HealthReport,
    LEGAL_TRANSITIONS,
    Observation,
    ProtocolError,
    ReplicaState,
    StepResult,
    validate_action,
)
from .tasks import TaskSpec, evaluate, is_success

logger = logging.getLogger(__name__)

DEFAULT_BACKOFF_MS = (100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0)

TransitionObserver = Callable[[str, ReplicaState, ReplicaState], None]


def default_backend_factory(env: Mapping[str, Any]) -> EnvironmentBackend:
    return GridSimBackend(SimConfig.from_dict(env))


class ReplicaManager:
    """State manager for a single environment replica."""

    def __init__(
        self,
        replica_id: str,
        backend_factory: Callable[[Mapping[str, Any]], EnvironmentBackend] | None = None,
        *,
        watchdog_interval_ms: float = 100.0,
        step_timeout_ms: float = 10_000.0,
        recovery_provision_ms: tuple[float, float] = (0.0, 0.0),
        recovery_backoff_ms: tuple[float, ...] = DEFAULT_BACKOFF_MS,
        recovery_seed: int = 0,
    ):
        self.replica_id = replica_id
        self.watchdog_interval_ms = watchdog_interval_ms
        self.step_timeout_ms = step_timeout_ms
        self.recovery_provision_ms = recovery_provision_ms
        self.recovery_backoff_ms = recovery_backoff_ms
        self.recovery_seed = recovery_seed

        self._backend_factory = backend_factory or default_backend_factory
        self.backend: EnvironmentBackend | None = None

        self._state = ReplicaState.UNCONFIGURED
        self._state_lock = threading.Lock()
        self._op_lock = threading.Lock()
        self._observers: list[TransitionObserver] = []

        self.task: TaskSpec | None = None
        self.episode_active = False
        self.episode_aborted = False
        self.turn = 0
        self.crash_count = 0
        self.crash_cause: str | None = None
        self._episode_seed = 0
        self._seed_counter = 0

        self._step_started_at: float | None = None
        self._recovery_active = False
        # crash bookkeeping for the operation currently in flight: the
        # cause if something killed it, and the crash epoch it started in
        self._op_crash_cause: str | None = None
        self._op_crash_epoch = 0

        self._created_at = time.monotonic()
        self.last_transition_at = time.time()

        self._closing = threading.Event()
        self._watchdog = threading.Thread(
            target=self._watchdog_loop, name=f"watchdog-{replica_id}", daemon=True
        )
        self._watchdog.start()

    # -- state machine ------------------------------------------------

    @property
    def state(self) -> ReplicaState:
        return self._state

    def add_transition_observer(self, fn: TransitionObserver) -> None:
        """Hook every (from, to) transition; used by legality checks in tests."""
        self._observers.append(fn)

    def _cas(self, allowed_from: tuple[ReplicaState, ...], to: ReplicaState) -> ReplicaState | None:
        """Move to ``to`` iff the current state is in ``allowed_from``.

        Returns the prior state on success, None if the state had moved
        under us (typically a concurrent crash declaration).
        """
        with self._state_lock:
            frm = self._state
            if frm not in allowed_from:
                return None
            if (frm, to) not in LEGAL_TRANSITIONS:
                raise RuntimeError(
                    f"{self.replica_id}: illegal transition {frm.value} -> {to.value}"
                )
            self._state = to
            self.last_transition_at = time.time()
        self._emit(frm, to)
        return frm

    def _emit(self, frm: ReplicaState, to: ReplicaState) -> None:
        for fn in self._observers:
            fn(self.replica_id, frm, to)

    def _unavailable_error(self) -> ProtocolError:
        state = self._state
        if state == ReplicaState.CRASHED:
            return ProtocolError(
                ErrorCode.REPLICA_CRASHED,
                f"{self.replica_id} crashed",
                {"state": state.value, "cause": self.crash_cause},
            )
        if state == ReplicaState.RECOVERING:
            return ProtocolError(
                ErrorCode.REPLICA_RECOVERING,
                f"{self.replica_id} is recovering",
                {"state": state.value},
            )
        return ProtocolError(
            ErrorCode.REPLICA_BUSY,
            f"{self.replica_id} is busy",
            {"state": state.value},
        )

    # -- public operations --------------------------------------------

    def configure(self, task: TaskSpec) -> HealthReport:
        """Install a task, (re)provisioning the backend from its env config."""
        if not self._op_lock.acquire(blocking=False):
            raise self._unavailable_error()
        try:
            if self._cas(
                (ReplicaState.UNCONFIGURED, ReplicaState.READY), ReplicaState.CONFIGURING
            ) is None:
                raise self._unavailable_error()
            old = self.backend
            if old is not None:
                old.destroy()
            self.task = task
            self.episode_active = False
            self.episode_aborted = False
            self.turn = 0
            try:
                backend = self._backend_factory(task.env)
                backend.create()
            except Exception as exc:
                self._declare_crash("provision")
                raise ProtocolError(
                    ErrorCode.REPLICA_CRASHED,
                    f"{self.replica_id}: provisioning failed: {exc}",
                ) from exc
            self.backend = backend
            if self._cas((ReplicaState.CONFIGURING,), ReplicaState.READY) is None:
                # crashed out from under us while provisioning
                raise self._unavailable_error()
            return self.health()
        finally:
            self._op_lock.release()

    def reset(self, seed: int | None = None) -> tuple[Observation, dict[str, Any]]:
        """Begin a fresh episode; returns the first observation."""
        if not self._op_lock.acquire(blocking=False):
            raise self._unavailable_error()
        try:
            self._require_task()
            if seed is None:
                self._seed_counter += 1
                seed = self._seed_counter
            self._enter_busy()
            t0 = time.perf_counter()
            try:
                obs = self.backend.reset(seed)
            except BackendCrashed:
                raise self._on_backend_crash()
            finally:
                self._exit_busy()
            latency_ms = (time.perf_counter() - t0) * 1000.0
            self.episode_active = True
            self.episode_aborted = False
            self.turn = 0
            self._episode_seed = seed
            info = {
                "episode_seed": seed,
                "latency_ms": latency_ms,
                "task_id": self.task.task_id,
                "turn": 0,
            }
            return obs, info
        finally:
            self._op_lock.release()

    def step(self, action: Action) -> StepResult:
        """Apply one action, score it, and advance the episode."""
        if not self._op_lock.acquire(blocking=False):
            raise self._unavailable_error()
        try:
            self._require_task()
            if not self.episode_active:
                if self.episode_aborted:
                    raise ProtocolError(
                        ErrorCode.REPLICA_CRASHED,
                        f"{self.replica_id}: episode aborted by recovery",
                        {"aborted": True},
                    )
                raise ProtocolError(
                    ErrorCode.EPISODE_DONE,
                    f"{self.replica_id}: no active episode; reset first",
                )
            task = self.task
            validate_action(
                action,
                screen_width=task.env.get("screen_width", 192),
                screen_height=task.env.get("screen_height", 192),
            )
            self._enter_busy()
            t0 = time.perf_counter()
            try:
                obs = self.backend.apply(action)
            except BackendCrashed:
                raise self._on_backend_crash()
            finally:
                self._exit_busy()
            latency_ms = (time.perf_counter() - t0) * 1000.0

            state = obs.metadata.get("state")
            if not isinstance(state, dict):
                state = self.backend.snapshot_state()
            score = evaluate(task.evaluator, state)
            success = is_success(score)
            self.turn += 1
            terminated = action.kind == "terminate"
            done = (
                terminated
                or (task.early_stop and success)
                or self.turn >= task.step_limit
            )
            info: dict[str, Any] = {
                "turn": self.turn,
                "latency_ms": latency_ms,
                "episode_seed": self._episode_seed,
                "task_id": task.task_id,
                "success": success,
            }
            if done:
                self.episode_active = False
                info["status"] = "COMPLETE" if (terminated or success) else "TRUNCATED"
            return StepResult(observation=obs, reward=score, done=done, info=info)
        finally:
            self._op_lock.release()

    def evaluate_now(self) -> tuple[float, bool]:
        """Score the current state on demand, without advancing the episode."""
        if not self._op_lock.acquire(blocking=False):
            raise self._unavailable_error()
        try:
            self._require_task()
            if self._cas((ReplicaState.READY,), ReplicaState.EVALUATING) is None:
                raise self._unavailable_error()
            with self._state_lock:
                self._op_crash_cause = None
                self._op_crash_epoch = self.crash_count
            try:
                score = evaluate(self.task.evaluator, self.backend.snapshot_state())
            except BackendCrashed:
                raise self._on_backend_crash()
            finally:
                self._cas((ReplicaState.EVALUATING,), ReplicaState.READY)
            return score, is_success(score)
        finally:
            self._op_lock.release()

    def health(self) -> HealthReport:
        """Non-blocking status snapshot; safe to call at any time."""
        with self._state_lock:
            return HealthReport(
                replica_id=self.replica_id,
                state=self._state,
                task_id=self.task.task_id if self.task else None,
                episode_active=self.episode_active,
                turn=self.turn,
                uptime_s=time.monotonic() - self._created_at,
                crash_count=self.crash_count,
                last_transition_at=self.last_transition_at,
            )

    def crash_now(self, cause: str = "external") -> None:
        """Fault injection: kill the replica immediately."""
        self._declare_crash(cause)

    def close(self) -> None:
        """Stop the watchdog and tear the backend down."""
        self._closing.set()
        backend = self.backend
        if backend is not None:
            backend.destroy()
        self._watchdog.join(timeout=2.0)

    # -- helpers ------------------------------------------------------

    def _require_task(self) -> None:
        state = self._state
        if state == ReplicaState.UNCONFIGURED or self.task is None:
            raise ProtocolError(
                ErrorCode.UNKNOWN_TASK, f"{self.replica_id}: no task configured"
            )
        if state != ReplicaState.READY:
            raise self._unavailable_error()

    def _enter_busy(self) -> None:
        with self._state_lock:
            if self._state != ReplicaState.READY:
                busy = False
            else:
                self._state = ReplicaState.BUSY
                self.last_transition_at = time.time()
                self._step_started_at = time.monotonic()
                self._op_crash_cause = None
                self._op_crash_epoch = self.crash_count
                busy = True
        if not busy:
            raise self._unavailable_error()
        self._emit(ReplicaState.READY, ReplicaState.BUSY)

    def _exit_busy(self) -> None:
        with self._state_lock:
            if self._state == ReplicaState.BUSY:
                self._state = ReplicaState.READY
                self.last_transition_at = time.time()
                self._step_started_at = None
                moved = True
            else:
                # a crash was declared mid-step; leave state alone
                self._step_started_at = None
                moved = False
        if moved:
            self._emit(ReplicaState.BUSY, ReplicaState.READY)

    def _on_backend_crash(self) -> ProtocolError:
        with self._state_lock:
            cause = self._op_crash_cause
            self._op_crash_cause = None
            epoch = self._op_crash_epoch
        if cause is None:
            # the backend died under this operation and nothing declared
            # it yet; the epoch guard stops a slow thread from re-crashing
            # a replica that already crashed and recovered behind its back
            self._declare_crash("fault", only_if_epoch=epoch)
            cause = self.crash_cause or "fault"
        if cause == "timeout":
            return ProtocolError(
                ErrorCode.TIMEOUT,
                f"{self.replica_id}: step exceeded {self.step_timeout_ms:.0f} ms",
                {"cause": cause},
            )
        return ProtocolError(
            ErrorCode.REPLICA_CRASHED,
            f"{self.replica_id} crashed during operation",
            {"cause": cause},
        )

    def _declare_crash(self, cause: str, only_if_epoch: int | None = None) -> None:
        with self._state_lock:
            if self._state in (ReplicaState.CRASHED, ReplicaState.RECOVERING):
                return
            if only_if_epoch is not None and self.crash_count != only_if_epoch:
                return
            frm = self._state
            if frm in (ReplicaState.BUSY, ReplicaState.EVALUATING):
                self._op_crash_cause = cause
            self._state = ReplicaState.CRASHED
            self.last_transition_at = time.time()
            self.crash_count += 1
            self.crash_cause = cause
            if self.episode_active:
                self.episode_active = False
                self.episode_aborted = True
            self._step_started_at = None
            spawn = not self._recovery_active
            if spawn:
                self._recovery_active = True
        self._emit(frm, ReplicaState.CRASHED)
        backend = self.backend
        if backend is not None:
            backend.crash_now()
        logger.warning("%s crashed (%s)", self.replica_id, cause)
        if spawn and not self._closing.is_set():
            threading.Thread(
                target=self._recover, name=f"recover-{self.replica_id}", daemon=True
            ).start()

    def _recover(self) -> None:
        try:
            if self._cas((ReplicaState.CRASHED,), ReplicaState.RECOVERING) is None:
                return
            old = self.backend
            if old is not None:
                old.destroy()
            lo, hi = self.recovery_provision_ms
            if hi > 0:
                rng = random.Random(
                    f"{self.replica_id}:{self.crash_count}:{self.recovery_seed}"
                )
                if self._closing.wait(rng.uniform(lo, hi) / 1000.0):
                    return
            if self.task is None:
                self.backend = None
                self._cas((ReplicaState.RECOVERING,), ReplicaState.UNCONFIGURED)
                return
            attempt = 0
            while not self._closing.is_set():
                try:
                    backend = self._backend_factory(self.task.env)
                    backend.create()
                    self.backend = backend
                    self._cas((ReplicaState.RECOVERING,), ReplicaState.READY)
                    logger.info(
                        "%s recovered after %d attempt(s)", self.replica_id, attempt + 1
                    )
                    return
                except Exception as exc:
                    schedule = self.recovery_backoff_ms
                    backoff = schedule[min(attempt, len(schedule) - 1)] / 1000.0
                    attempt += 1
                    logger.warning(
                        "%s recovery attempt %d failed (%s); retrying in %.0f ms",
                        self.replica_id,
                        attempt,
                        exc,
                        backoff * 1000.0,
                    )
                    if self._closing.wait(backoff):
                        return
        finally:
            with self._state_lock:
                self._recovery_active = False

    def _watchdog_loop(self) -> None:
        interval_s = self.watchdog_interval_ms / 1000.0
        while not self._closing.wait(interval_s):
            with self._state_lock:
                state = self._state
                started = self._step_started_at
                backend = self.backend
                recovery_active = self._recovery_active
            if state == ReplicaState.CRASHED and not recovery_active:
                # backstop: the crash path normally spawns recovery itself
                with self._state_lock:
                    if self._state != ReplicaState.CRASHED or self._recovery_active:
                        continue
                    self._recovery_active = True
                threading.Thread(
                    target=self._recover,
                    name=f"recover-{self.replica_id}",
                    daemon=True,
                ).start()
            elif (
                state == ReplicaState.BUSY
                and started is not None
                and (time.monotonic() - started) * 1000.0 > self.step_timeout_ms
            ):
                self._declare_crash("timeout")
            elif (
                state in (ReplicaState.READY, ReplicaState.BUSY, ReplicaState.EVALUATING)
                and backend is not None
                and not backend.is_alive()
            ):
                self._declare_crash("fault")


class ManagerClient:
    """Uniform call surface the data server uses to talk to a replica.

    Implementations exist for in-process managers (below) and for
    managers behind HTTP (see :mod:`gridfleet.wire`).
    """

    replica_id: str

    def configure(self, task: TaskSpec) -> HealthReport:
        raise NotImplementedError

    def reset(self, seed: int | None = None) -> tuple[Observation, dict[str, Any]]:
        raise NotImplementedError

    def step(self, action: Action) -> StepResult:
        raise NotImplementedError

    def evaluate_now(self) -> tuple[float, bool]:
        raise NotImplementedError

    def health(self) -> HealthReport:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LocalManagerClient(ManagerClient):
    """In-process pass-through to a :class:`ReplicaManager`."""

    def __init__(self, manager: ReplicaManager):
        self.manager = manager
        self.replica_id = manager.replica_id

    def configure(self, task: TaskSpec) -> HealthReport:
        return self.manager.configure(task)

    def reset(self, seed: int | None = None) -> tuple[Observation, dict[str, Any]]:
        return self.manager.reset(seed)

    def step(self, action: Action) -> StepResult:
        return self.manager.step(action)

    def evaluate_now(self) -> tuple[float, bool]:
        return self.manager.evaluate_now()

    def health(self) -> HealthReport:
        return self.manager.health()

    def close(self) -> None:
        self.manager.close()
