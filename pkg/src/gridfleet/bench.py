"""Benchmark and fault-injection harness.

Builds in-process fleets (N sim replicas, each behind its own manager,
fronted by one data server) and drives them with the same
submit/collect loop an agent trainer would use: batch-reset, submit
one action per replica, drain completed steps, submit follow-ups, and
re-reset replicas whose episodes ended so the fleet stays saturated.

Five experiment runners share that loop: throughput scaling across
fleet sizes, per-step latency under load, crash-recovery timing,
sustained chaos (random crashes mid-load), and data-generation rate
against the closed-form prediction.  Results come back as plain dicts
and optional CSV files.
"""

from __future__ import annotations

import csv
import logging
import random
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .manager import LocalManagerClient, ReplicaManager
from .planner import datagen_estimate
from .protocol import Action, EpisodeStatus, ErrorCode, ProtocolError
from .server import DataServer
from .store import TrajectoryStore
from .tasks import TaskSpec

logger = logging.getLogger(__name__)


def make_bench_task(
    task_id: str = "bench-grid",
    *,
    rows: int = 8,
    cols: int = 8,
    screen_px: int = 64,
    latency_ms: float = 50.0,
    latency_jitter_ms: float = 0.0,
    crash_per_step: float = 0.0,
    step_limit: int = 25,
    early_stop: bool = False,
) -> TaskSpec:
    """A small, cheap task: tiny grid, tiny frames, trivial evaluator.

    Frame geometry is deliberately small so per-step encode cost stays
    in the tens of microseconds and measured rates reflect the engine,
    not the PNG encoder.
    """
    return TaskSpec(
        task_id=task_id,
        prompt="Benchmark load: walk the cursor around the grid.",
        domain="workflow",
        env={
            "rows": rows,
            "cols": cols,
            "screen_width": screen_px,
            "screen_height": screen_px,
            "latency_base_ms": latency_ms,
            "latency_jitter_ms": latency_jitter_ms,
            "crash_per_step": crash_per_step,
        },
        evaluator={"kind": "cell_equals", "row": 0, "col": 0, "value": 7},
        step_limit=step_limit,
        early_stop=early_stop,
    )


def random_policy(seed: int, screen_px: int = 64) -> Callable[[], Action]:
    """Uniform choice over a fixed set of cheap, always-valid actions."""
    rng = random.Random(seed)
    candidates: list[Action] = [
        Action("key_press", {"key": "Up"}),
        Action("key_press", {"key": "Down"}),
        Action("key_press", {"key": "Left"}),
        Action("key_press", {"key": "Right"}),
        Action("key_press", {"key": "Tab"}),
        Action("noop"),
        Action("mouse_move", {"x": screen_px // 3, "y": screen_px // 3}),
        Action("scroll", {"dx": 0, "dy": 1}),
    ]
    return lambda: candidates[rng.randrange(len(candidates))]


class LocalFleet:
    """N sim replicas, each with its own manager, behind one data server."""

    def __init__(
        self,
        n_replicas: int,
        tasks: dict[str, TaskSpec] | TaskSpec,
        *,
        watchdog_interval_ms: float = 100.0,
        step_timeout_ms: float = 10_000.0,
        recovery_provision_ms: tuple[float, float] = (0.0, 0.0),
        poll_interval_ms: float = 200.0,
        max_workers: int | None = None,
        store_root: str | Path | None = None,
        cleanup: bool | None = None,
        recovery_seed: int = 0,
    ):
        if isinstance(tasks, TaskSpec):
            tasks = {tasks.task_id: tasks}
        if store_root is None:
            store_root = tempfile.mkdtemp(prefix="gridfleet-bench-")
            if cleanup is None:
                cleanup = True
        self._cleanup = bool(cleanup)
        self.store_root = Path(store_root)
        self.store = TrajectoryStore(self.store_root)
        self.server = DataServer(
            self.store,
            tasks,
            max_workers=max_workers or n_replicas + 8,
            poll_interval_ms=poll_interval_ms,
        )
        self.managers: list[ReplicaManager] = []
        for i in range(n_replicas):
            manager = ReplicaManager(
                f"mgr-local-{i}",
                watchdog_interval_ms=watchdog_interval_ms,
                step_timeout_ms=step_timeout_ms,
                recovery_provision_ms=recovery_provision_ms,
                recovery_seed=recovery_seed,
            )
            self.managers.append(manager)
            self.server.register(LocalManagerClient(manager))
        self.server.warm_up()

    def close(self) -> None:
        self.server.close()
        # managers wind down concurrently; serial joins would stack their
        # watchdog intervals
        with ThreadPoolExecutor(max_workers=32) as pool:
            list(pool.map(lambda m: m.close(), self.managers))
        if self._cleanup:
            shutil.rmtree(self.store_root, ignore_errors=True)

    def __enter__(self) -> "LocalFleet":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


@dataclass
class LoadStats:
    """What one driver run observed during its measurement window."""

    steps: int = 0
    elapsed_s: float = 0.0
    episodes_completed: int = 0
    episodes_aborted: int = 0
    handled_errors: int = 0
    latencies_ms: list[float] = field(default_factory=list)

    @property
    def steps_per_sec(self) -> float:
        return self.steps / self.elapsed_s if self.elapsed_s > 0 else 0.0

    @property
    def mean_latency_ms(self) -> float:
        return float(np.mean(self.latencies_ms)) if self.latencies_ms else 0.0

    @property
    def std_latency_ms(self) -> float:
        return float(np.std(self.latencies_ms)) if self.latencies_ms else 0.0


def drive_load(
    server: DataServer,
    task_id: str,
    n_replicas: int,
    *,
    duration_s: float | None = None,
    max_steps: int | None = None,
    policy: Callable[[], Action] | None = None,
    policy_seed: int = 0,
    prime: bool = True,
    reconcile: bool = False,
    batch_timeout_ms: float = 1000.0,
) -> LoadStats:
    """Drive a saturated load until the duration or step budget runs out.

    With ``prime`` the first full round of outcomes is consumed before
    the clock starts, so measured rates are steady-state.  With
    ``reconcile`` the driver periodically re-discovers idle replicas
    from the server (needed under chaos, where episodes abort without
    the driver seeing a final outcome).  Every fleet-side failure
    surfaces as a handled error; this function raising is a bug.
    """
    policy = policy or random_policy(policy_seed)
    stats = LoadStats()
    idle: set[str] = set()

    def submit(replica_id: str) -> None:
        try:
            server.async_step(replica_id, policy())
        except ProtocolError:
            stats.handled_errors += 1
            idle.discard(replica_id)

    def reset_some(want: int) -> list[dict[str, Any]]:
        """Reset up to ``want`` idle replicas; shrinks the request if the
        server has fewer available instead of failing the round."""
        try:
            result = server.batch_reset(task_id, want)
        except ProtocolError as err:
            available = 0
            if isinstance(err.detail, dict):
                available = int(err.detail.get("available", 0))
            if available < 1:
                return []
            try:
                result = server.batch_reset(task_id, min(available, want))
            except ProtocolError:
                stats.handled_errors += 1
                return []
        stats.handled_errors += len(result["failures"])
        return result["items"]

    def reset_idle() -> None:
        # the server picks its own idle replicas, which may differ from
        # the driver's view; two attempts cover the common split
        for _ in range(2):
            if not idle:
                return
            items = reset_some(len(idle))
            if not items:
                return
            for item in items:
                idle.discard(item["replica_id"])
                submit(item["replica_id"])

    # continuation runs land on a fleet that is already mid-flight; fill
    # whatever is actually idle rather than demanding the full count
    for item in reset_some(n_replicas):
        submit(item["replica_id"])

    measuring = not prime
    primed_seen = 0
    t_start = time.monotonic()
    hard_deadline = t_start + (duration_s or 0.0) * 3 + 30.0
    deadline: float | None = None
    if measuring and duration_s is not None:
        deadline = t_start + duration_s
        stats_t0 = t_start
    else:
        stats_t0 = t_start
    last_reconcile = t_start

    while True:
        now = time.monotonic()
        if now > hard_deadline:
            logger.warning("drive_load hit its hard deadline; stopping")
            break
        if not measuring and now - t_start > 15.0:
            # priming stalled (heavily degraded fleet); measure anyway
            measuring = True
            stats_t0 = now
            if duration_s is not None:
                deadline = stats_t0 + duration_s
        if deadline is not None and now >= deadline:
            break
        if max_steps is not None and stats.steps >= max_steps:
            break
        if reconcile and now - last_reconcile > 0.25:
            last_reconcile = now
            for row in server.list_replicas():
                if (
                    row["available"]
                    and row["episode_id"] is None
                    and row["pending_ticket"] is None
                ):
                    idle.add(row["replica_id"])
            reset_idle()
        remaining_ms = batch_timeout_ms
        if deadline is not None:
            remaining_ms = max(min(remaining_ms, (deadline - now) * 1000.0), 1.0)
        batch = server.next_batch(max_items=n_replicas, timeout_ms=remaining_ms)
        for outcome in batch:
            replica_id = outcome["replica_id"]
            if "error" in outcome:
                stats.handled_errors += 1
                if outcome.get("aborted"):
                    stats.episodes_aborted += 1
                idle.add(replica_id)
                continue
            if measuring:
                stats.steps += 1
                info = outcome.get("info", {})
                lat = info.get("latency_ms")
                if lat is not None:
                    stats.latencies_ms.append(lat)
            else:
                primed_seen += 1
                if primed_seen >= n_replicas:
                    measuring = True
                    stats_t0 = time.monotonic()
                    if duration_s is not None:
                        deadline = stats_t0 + duration_s
            if outcome.get("done"):
                if measuring:
                    stats.episodes_completed += 1
                idle.add(replica_id)
            else:
                submit(replica_id)
        if batch and idle:
            reset_idle()
    stats.elapsed_s = time.monotonic() - stats_t0
    return stats


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> dict[str, float]:
    """Least-squares line plus coefficient of determination."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    predicted = slope * x + intercept
    ss_res = float(np.sum((y - predicted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Experiments


def run_throughput_sweep(
    ns: Sequence[int] = (8, 16, 32, 64),
    *,
    latency_ms: float = 50.0,
    duration_s: float = 2.0,
    repetitions: int = 10,
    step_limit: int = 400,
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """Steady-state step rate per fleet size, with a linearity fit.

    The ideal rate for N replicas at latency L is ``N / L``; results
    include each point's ratio against that and a least-squares line
    over the per-size means.  Episodes are long by default so the
    measurement sees stepping, not episode turnover; turnover cost is
    ``run_datagen``'s subject.
    """
    task = make_bench_task(latency_ms=latency_ms, step_limit=step_limit)
    rows: list[dict[str, Any]] = []
    for n in ns:
        with LocalFleet(n, task) as fleet:
            for rep in range(repetitions):
                stats = drive_load(
                    fleet.server,
                    task.task_id,
                    n,
                    duration_s=duration_s,
                    policy_seed=rep,
                )
                rows.append(
                    {
                        "n": n,
                        "rep": rep,
                        "steps_per_sec": stats.steps_per_sec,
                        "mean_latency_ms": stats.mean_latency_ms,
                        "handled_errors": stats.handled_errors,
                        "steps": stats.steps,
                        "elapsed_s": stats.elapsed_s,
                    }
                )
                logger.info(
                    "throughput n=%d rep=%d: %.1f steps/s",
                    n,
                    rep,
                    stats.steps_per_sec,
                )
    ideal_per_replica = 1000.0 / latency_ms
    points = {}
    for n in ns:
        rates = [r["steps_per_sec"] for r in rows if r["n"] == n]
        points[n] = {
            "mean": float(np.mean(rates)),
            "std": float(np.std(rates)),
            "ideal": ideal_per_replica * n,
            "ratio_to_ideal": float(np.mean(rates)) / (ideal_per_replica * n),
        }
    fit = linear_fit(list(ns), [points[n]["mean"] for n in ns])
    summary = {
        "latency_ms": latency_ms,
        "duration_s": duration_s,
        "repetitions": repetitions,
        "points": points,
        "fit": fit,
        "ideal_slope": ideal_per_replica,
    }
    if out_dir is not None:
        out = Path(out_dir)
        _write_csv(
            out / "throughput.csv",
            ["n", "rep", "steps_per_sec", "mean_latency_ms", "handled_errors", "steps", "elapsed_s"],
            [[r[k] for k in ("n", "rep", "steps_per_sec", "mean_latency_ms", "handled_errors", "steps", "elapsed_s")] for r in rows],
        )
        _write_csv(
            out / "throughput_summary.csv",
            ["n", "mean_steps_per_sec", "std_steps_per_sec", "ideal", "ratio_to_ideal"],
            [
                [n, points[n]["mean"], points[n]["std"], points[n]["ideal"], points[n]["ratio_to_ideal"]]
                for n in ns
            ],
        )
    return summary


def run_latency_sweep(
    ns: Sequence[int] = (8, 128),
    *,
    latency_ms: float = 50.0,
    duration_s: float = 2.0,
    repetitions: int = 10,
    step_limit: int = 400,
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """Mean per-step latency by fleet size; the interesting number is
    how little it grows between the smallest and largest fleet."""
    task = make_bench_task(latency_ms=latency_ms, step_limit=step_limit)
    points: dict[int, dict[str, float]] = {}
    rows: list[tuple[int, int, float, float]] = []
    for n in ns:
        means: list[float] = []
        with LocalFleet(n, task) as fleet:
            for rep in range(repetitions):
                stats = drive_load(
                    fleet.server,
                    task.task_id,
                    n,
                    duration_s=duration_s,
                    policy_seed=100 + rep,
                )
                means.append(stats.mean_latency_ms)
                rows.append((n, rep, stats.mean_latency_ms, stats.std_latency_ms))
        points[n] = {
            "mean_ms": float(np.mean(means)),
            "std_ms": float(np.std(means)),
            "runs": float(len(means)),
        }
        logger.info(
            "latency n=%d: %.2f ms (+/- %.2f across runs)",
            n,
            points[n]["mean_ms"],
            points[n]["std_ms"],
        )
    n_lo, n_hi = min(ns), max(ns)
    summary = {
        "latency_ms": latency_ms,
        "points": points,
        "ratio_largest_to_smallest": points[n_hi]["mean_ms"] / points[n_lo]["mean_ms"]
        if points[n_lo]["mean_ms"] > 0
        else float("inf"),
    }
    if out_dir is not None:
        _write_csv(
            Path(out_dir) / "latency.csv",
            ["n", "rep", "mean_latency_ms", "std_latency_ms"],
            rows,
        )
    return summary


def run_recovery_experiment(
    n_replicas: int = 64,
    *,
    provision_ms: tuple[float, float] = (500.0, 1500.0),
    timeout_s: float = 10.0,
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """Crash every replica at once and time each one's return to READY."""
    task = make_bench_task(latency_ms=5.0)
    crash_at: dict[str, float] = {}
    ready_at: dict[str, float] = {}

    def observer(replica_id: str, frm: Any, to: Any) -> None:
        now = time.monotonic()
        if to.value == "CRASHED":
            crash_at[replica_id] = now
        elif frm.value == "RECOVERING" and to.value == "READY":
            ready_at[replica_id] = now

    with LocalFleet(
        n_replicas, task, recovery_provision_ms=provision_ms, recovery_seed=7
    ) as fleet:
        fleet.server.batch_reset(task.task_id, n_replicas)
        for manager in fleet.managers:
            manager.add_transition_observer(observer)
        for manager in fleet.managers:
            manager.crash_now("chaos")
        deadline = time.monotonic() + timeout_s
        while len(ready_at) < n_replicas and time.monotonic() < deadline:
            time.sleep(0.02)
    durations_ms = sorted(
        (ready_at[rid] - crash_at[rid]) * 1000.0 for rid in ready_at if rid in crash_at
    )
    curve = [
        (duration, (i + 1) / n_replicas) for i, duration in enumerate(durations_ms)
    ]
    summary = {
        "n_replicas": n_replicas,
        "recovered": len(durations_ms),
        "provision_ms": list(provision_ms),
        "max_ms": durations_ms[-1] if durations_ms else None,
        "min_ms": durations_ms[0] if durations_ms else None,
        "mean_ms": float(np.mean(durations_ms)) if durations_ms else None,
        "durations_ms": durations_ms,
        "curve": curve,
    }
    if out_dir is not None:
        _write_csv(
            Path(out_dir) / "recovery.csv",
            ["duration_ms", "fraction_recovered"],
            curve,
        )
    return summary


def run_chaos(
    n_replicas: int = 64,
    *,
    total_steps: int = 10_000,
    crash_per_step: float = 0.01,
    latency_ms: float = 5.0,
    step_limit: int = 15,
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """Sustained load with random crashes; checks nothing gets lost.

    Returns full episode accounting from a cold re-scan of the store:
    every episode opened must be closed exactly once, with crashes
    flagged ABORTED, and every referenced frame present.
    """
    task = make_bench_task(
        latency_ms=latency_ms,
        crash_per_step=crash_per_step,
        step_limit=step_limit,
    )
    keep = out_dir is not None
    store_root = (
        Path(out_dir) / "chaos-store"
        if keep
        else Path(tempfile.mkdtemp(prefix="gridfleet-chaos-"))
    )
    fleet = LocalFleet(
        n_replicas,
        task,
        recovery_provision_ms=(50.0, 150.0),
        poll_interval_ms=100.0,
        cleanup=False,
        store_root=store_root,
    )
    try:
        stats = drive_load(
            fleet.server,
            task.task_id,
            n_replicas,
            max_steps=total_steps,
            prime=False,
            reconcile=True,
            batch_timeout_ms=200.0,
        )
        # drain stragglers so the conservation counters settle
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            counters = fleet.server.metrics()
            if counters["tickets_pending"] == 0:
                break
            fleet.server.next_batch(max_items=n_replicas, timeout_ms=100.0)
        counters = fleet.server.metrics()
    finally:
        fleet.close()  # closes any still-open episodes as ABORTED
    # cold re-scan: the store itself is the accounting oracle
    store = TrajectoryStore(store_root)
    records = store.query()
    by_status: dict[str, int] = {s.value: 0 for s in EpisodeStatus}
    unclosed = 0
    for rec in records:
        if rec.status is None:
            unclosed += 1
        else:
            by_status[rec.status] += 1
    integrity = store.integrity_report()
    summary = {
        "steps_completed": stats.steps,
        "elapsed_s": stats.elapsed_s,
        "handled_errors": stats.handled_errors,
        "episodes_opened": len(records),
        "episodes_by_status": by_status,
        "episodes_unclosed": unclosed,
        "aborted_seen_by_driver": stats.episodes_aborted,
        "tickets_issued": counters["tickets_issued"],
        "tickets_ok": counters["tickets_ok"],
        "tickets_error": counters["tickets_error"],
        "tickets_pending": counters["tickets_pending"],
        "integrity_problems": integrity["problems"],
        "distinct_refs": integrity["distinct_refs"],
        "blobs_on_disk": integrity["blobs_on_disk"],
    }
    if not keep:
        shutil.rmtree(store_root, ignore_errors=True)
    return summary


def run_datagen(
    n_replicas: int = 64,
    *,
    turns_per_episode: int = 15,
    latency_ms: float = 50.0,
    duration_s: float = 5.0,
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    """Measured generation rate vs the closed-form prediction."""
    task = make_bench_task(
        latency_ms=latency_ms, step_limit=turns_per_episode
    )
    with LocalFleet(n_replicas, task) as fleet:
        stats = drive_load(
            fleet.server,
            task.task_id,
            n_replicas,
            duration_s=duration_s,
            prime=True,
        )
    predicted = datagen_estimate(n_replicas, turns_per_episode, latency_ms)
    measured_traj_per_min = (
        stats.episodes_completed / stats.elapsed_s * 60.0 if stats.elapsed_s > 0 else 0.0
    )
    summary = {
        "n_replicas": n_replicas,
        "turns_per_episode": turns_per_episode,
        "latency_ms": latency_ms,
        "measured_steps_per_sec": stats.steps_per_sec,
        "measured_trajectories_per_min": measured_traj_per_min,
        "predicted_steps_per_sec": predicted["steps_per_sec"],
        "predicted_trajectories_per_min": predicted["trajectories_per_min"],
        "episodes_completed": stats.episodes_completed,
        "elapsed_s": stats.elapsed_s,
    }
    if out_dir is not None:
        _write_csv(
            Path(out_dir) / "datagen.csv",
            list(summary.keys()),
            [list(summary.values())],
        )
    return summary
