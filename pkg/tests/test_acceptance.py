"""Acceptance gate: one test per primary criterion, tolerances pinned.

Each test prints a single PASS/FAIL line on the real stdout so the
summary survives pytest capture; the asserts carry the same bounds.
"""

from __future__ import annotations

import json
import math
import random
import sys
import time

import pytest

from conftest import make_task
from gridfleet.backends import GridSimBackend
from gridfleet.bench import (
    LocalFleet,
    drive_load,
    make_bench_task,
    run_chaos,
    run_datagen,
    run_latency_sweep,
    run_recovery_experiment,
    run_throughput_sweep,
)
from gridfleet.manager import LEGAL_TRANSITIONS, ReplicaManager
from gridfleet.planner import (
    MachineType,
    contention_sweep,
    cost_per_replica,
    datagen_estimate,
    load_catalog,
    plan,
)
from gridfleet.protocol import Action, canonical_dumps
from gridfleet.store import TrajectoryStore
from gridfleet.tasks import evaluate, validate_evaluator

from test_manager import run_interleaving_storm
from test_planner import PROFILE, exact_exceedance
from test_tasks import COLS, ROWS, oracle, random_spec, random_state


_CAPSYS: pytest.CaptureFixture | None = None


@pytest.fixture(autouse=True)
def _live_reporting(capsys):
    global _CAPSYS
    _CAPSYS = capsys
    yield
    _CAPSYS = None


def echo(line: str) -> None:
    """Print on the real terminal even while pytest captures output."""
    if _CAPSYS is not None:
        with _CAPSYS.disabled():
            print(line, flush=True)
    else:
        print(line, file=sys.__stdout__, flush=True)


def check(name: str, ok: bool, detail: str) -> None:
    echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. throughput scales linearly with fleet size


def test_criterion_1_throughput_linearity():
    ns = (8, 16, 32, 64)
    summary = run_throughput_sweep(
        ns=ns, latency_ms=50.0, duration_s=2.0, repetitions=10
    )
    r2 = summary["fit"]["r2"]
    ratios = {n: summary["points"][n]["ratio_to_ideal"] for n in ns}
    detail = (
        f"r2={r2:.5f} (need >=0.98); mean/ideal per size "
        + ", ".join(f"n={n}:{ratios[n]:.3f}" for n in ns)
        + " (need within 10% of 20*N)"
    )
    ok = r2 >= 0.98 and all(0.9 <= ratios[n] <= 1.1 for n in ns)
    check("throughput-linearity", ok, detail)


# ---------------------------------------------------------------------------
# 2. per-step latency barely grows with fleet size


def test_criterion_2_latency_stability():
    summary = run_latency_sweep(
        ns=(8, 128), latency_ms=50.0, duration_s=1.5, repetitions=10
    )
    lo, hi = summary["points"][8], summary["points"][128]
    ratio = summary["ratio_largest_to_smallest"]
    detail = (
        f"n=8: {lo['mean_ms']:.2f}ms (std {lo['std_ms']:.2f} over 10 runs), "
        f"n=128: {hi['mean_ms']:.2f}ms (std {hi['std_ms']:.2f}), "
        f"ratio={ratio:.3f} (need <=1.2)"
    )
    check("latency-stability", ratio <= 1.2, detail)


# ---------------------------------------------------------------------------
# 3. a fully crashed fleet heals itself quickly


def test_criterion_3_full_crash_recovery():
    summary = run_recovery_experiment(
        64, provision_ms=(500.0, 1500.0), timeout_s=10.0
    )
    fractions = [f for _, f in summary["curve"]]
    monotone = fractions == sorted(fractions) and fractions[-1] == pytest.approx(1.0)
    ok = (
        summary["recovered"] == 64
        and summary["max_ms"] is not None
        and summary["max_ms"] < 5000.0
        and summary["min_ms"] >= 500.0
        and monotone
    )
    detail = (
        f"{summary['recovered']}/64 recovered, slowest {summary['max_ms']:.0f}ms "
        f"(need <5000), mean {summary['mean_ms']:.0f}ms, curve monotone={monotone}"
    )
    check("full-crash-recovery", ok, detail)


# ---------------------------------------------------------------------------
# 4. random crashes never surface as client failures or lost work


def test_criterion_4_chaos_fault_masking():
    summary = run_chaos(
        64, total_steps=10_000, crash_per_step=0.01, latency_ms=5.0, step_limit=15
    )
    conserved = (
        summary["tickets_issued"] == summary["tickets_ok"] + summary["tickets_error"]
        and summary["tickets_pending"] == 0
    )
    closed = sum(summary["episodes_by_status"].values())
    accounted = (
        summary["episodes_opened"] == closed and summary["episodes_unclosed"] == 0
    )
    aborted = summary["episodes_by_status"]["ABORTED"]
    ok = (
        summary["steps_completed"] >= 10_000
        and conserved
        and accounted
        and aborted > 0
        and summary["integrity_problems"] == []
    )
    detail = (
        f"{summary['steps_completed']} steps, zero driver exceptions; "
        f"tickets {summary['tickets_issued']}={summary['tickets_ok']}ok"
        f"+{summary['tickets_error']}err pending={summary['tickets_pending']}; "
        f"episodes {summary['episodes_opened']} opened = {closed} closed "
        f"({aborted} ABORTED flagged); store problems={len(summary['integrity_problems'])}"
    )
    check("chaos-fault-masking", ok, detail)


# ---------------------------------------------------------------------------
# 5. submitting a step never blocks on the step itself


def test_criterion_5_async_nonblocking():
    task = make_bench_task(latency_ms=500.0, step_limit=1000)
    act = Action("key_press", {"key": "Right"})
    timings_ms: list[float] = []
    with LocalFleet(64, task) as fleet:
        items = fleet.server.batch_reset(task.task_id, 64)["items"]
        ids = [item["replica_id"] for item in items]
        issued = 0
        while issued < 100:
            wave = ids[: min(64, 100 - issued)]
            for rid in wave:
                t0 = time.perf_counter()
                fleet.server.async_step(rid, act)
                timings_ms.append((time.perf_counter() - t0) * 1000.0)
            issued += len(wave)
            if issued < 100:
                got = 0
                while got < len(wave):
                    got += len(fleet.server.next_batch(max_items=64, timeout_ms=2000.0))
    under = sum(1 for t in timings_ms if t < 5.0)
    detail = (
        f"{under}/100 calls under 5ms at 500ms sim latency "
        f"(max {max(timings_ms):.3f}ms, mean {sum(timings_ms) / 100:.3f}ms)"
    )
    check("async-nonblocking", under == 100, detail)


# ---------------------------------------------------------------------------
# 6. capacity planner arithmetic, exact to 3 decimals


def test_criterion_6_planner_arithmetic():
    split = cost_per_replica(30.0, 128)
    catalog = load_catalog("config/catalog.toml")
    best = plan(catalog, 128)
    ok = (
        split == 0.234
        and best.machine.name == "xeon-e5-2699-v4"
        and best.cost_per_replica == 0.230
    )
    detail = (
        f"30/128 -> {split} (need 0.234 exactly); catalog pick {best.machine.name} "
        f"at {best.cost_per_replica:.3f}/replica-day (need xeon-e5-2699-v4 at 0.230)"
    )
    check("planner-arithmetic", ok, detail)


# ---------------------------------------------------------------------------
# 7. pooling burst risk falls as machines consolidate


def test_criterion_7_contention_oracle():
    ks = (1, 2, 4, 8, 16, 32, 64)
    curve = contention_sweep(ks, PROFILE, 1.1, trials=1_000_000, seed=0)
    mcs = [p for _, p in curve]
    monotone = all(a >= b for a, b in zip(mcs, mcs[1:]))
    worst = max(
        abs(p - exact_exceedance(k, PROFILE, 1.1)) for k, p in curve
    )
    ok = monotone and worst <= 0.01
    detail = (
        "p_exceed "
        + ", ".join(f"k={k}:{p:.4f}" for k, p in curve)
        + f"; monotone={monotone}, worst |mc-exact|={worst:.5f} (need <=0.01 at 1e6 trials)"
    )
    check("contention-oracle", ok, detail)


# ---------------------------------------------------------------------------
# 8. measured generation rate matches the closed form


def test_criterion_8_datagen_formula():
    summary = run_datagen(64, turns_per_episode=15, latency_ms=50.0, duration_s=6.0)
    ratio = (
        summary["measured_trajectories_per_min"]
        / summary["predicted_trajectories_per_min"]
    )
    ok = 0.85 <= ratio <= 1.15
    detail = (
        f"measured {summary['measured_trajectories_per_min']:.0f}/min vs "
        f"predicted {summary['predicted_trajectories_per_min']:.0f}/min, "
        f"ratio={ratio:.3f} (need within 15%)"
    )
    check("datagen-formula", ok, detail)
    # scale arithmetic is documented, not executed: a thousand-replica
    # fleet producing 1420 trajectories/min over 15-turn episodes
    # implies a per-step time near 2.9 s
    implied_step_s = 1024 * 60.0 / (1420 * 15)
    assert 2.8 <= implied_step_s <= 3.0
    inverted = datagen_estimate(1024, 15, implied_step_s * 1000.0)
    assert inverted["trajectories_per_min"] == pytest.approx(1420.0)
    echo(
        f"[note] datagen-formula: 1024-replica arithmetic documented, not executed "
        f"(implied step {implied_step_s:.2f}s -> 1420 traj/min)"
    )


# ---------------------------------------------------------------------------
# 9. property suites


def _replay_bytes(seed: int) -> list[bytes]:
    task = make_task(
        task_id="t-acc-replay",
        initial_cells=[[0, 0, 9], [1, 1, 5], [2, 3, 4], [3, 2, 8]],
        shuffle_on_reset=True,
    )
    actions = [
        Action("key_press", {"key": "Right"}),
        Action("type_text", {"text": "ab"}),
        Action("mouse_click", {"x": 9, "y": 9, "button": "left"}),
        Action("key_press", {"key": "Enter"}),
        Action("scroll", {"dx": 0, "dy": 1}),
        Action("api_call", {"name": "set_cell", "args": {"row": 0, "col": 0, "value": 7}}),
    ]
    manager = ReplicaManager("mgr-acc-replay-0")
    try:
        manager.configure(task)
        obs, _ = manager.reset(seed=seed)
        frames = [obs.screenshot]
        for action in actions:
            frames.append(manager.step(action).observation.screenshot)
    finally:
        manager.close()
    return frames


def test_criterion_9_property_suites(tmp_path):
    # state machine legality over 10^4 randomized interleavings
    pairs = run_interleaving_storm(10_000, min_transitions=300)
    illegal = [p for p in pairs if p not in LEGAL_TRANSITIONS]
    assert pairs and not illegal
    kinds = {(f.value, t.value) for f, t in pairs}
    assert ("READY", "BUSY") in kinds
    assert ("CRASHED", "RECOVERING") in kinds

    # episode replay determinism: byte-identical observations
    first, second, other = _replay_bytes(77), _replay_bytes(77), _replay_bytes(78)
    assert first == second
    assert first != other

    # trajectory store integrity: every ref resolves, reparse fixed point
    task = make_bench_task(task_id="acc-store", latency_ms=0.0, step_limit=5)
    fleet = LocalFleet(3, task, store_root=tmp_path)
    try:
        drive_load(fleet.server, task.task_id, 3, max_steps=90, prime=False)
    finally:
        fleet.close()
    store = TrajectoryStore(tmp_path)
    report = store.integrity_report()
    assert report["problems"] == []
    files = sorted((tmp_path / "episodes").glob("*.jsonl"))
    assert files
    reparsed = 0
    for file in files:
        for line in file.read_text().splitlines():
            assert canonical_dumps(json.loads(line)) == line
            reparsed += 1

    # evaluator algebra vs a child-wise brute-force oracle
    rng = random.Random(991)
    for _ in range(1000):
        spec = random_spec(rng)
        validate_evaluator(spec, rows=ROWS, cols=COLS)
        state = random_state(rng)
        assert math.isclose(
            evaluate(spec, state), oracle(spec, state), rel_tol=0.0, abs_tol=1e-12
        )

    echo(
        f"[PASS] property-suites: {len(pairs)} transitions legal over 10^4 op storm; "
        f"replay byte-identical over {len(first)} frames; store clean "
        f"({report['distinct_refs']} refs, {reparsed} lines reparse exactly); "
        f"evaluator matches oracle on 1000 random specs"
    )
