"""Data server: batching, tickets, episode accounting, fleet health."""

from __future__ import annotations

import time

import pytest

from conftest import make_task
from gridfleet.manager import LocalManagerClient, ReplicaManager
from gridfleet.protocol import Action, EpisodeStatus, ErrorCode, ProtocolError
from gridfleet.server import DataServer
from gridfleet.store import TrajectoryStore

RIGHT = Action("key_press", {"key": "Right"})
SOLVE = Action("api_call", {"name": "set_cell", "args": {"row": 0, "col": 0, "value": 7}})


class Fleet:
    """A server plus n in-process replicas, torn down as one unit."""

    def __init__(self, tmp_path, n: int = 2, tasks: dict | None = None, **server_kw):
        if tasks is None:
            t = make_task()
            tasks = {t.task_id: t}
        self.task_id = next(iter(tasks))
        self.store = TrajectoryStore(tmp_path / "store")
        self.managers = [
            ReplicaManager(f"mgr-t-{i}", watchdog_interval_ms=25.0) for i in range(n)
        ]
        self.server = DataServer(self.store, tasks, **server_kw)
        for m in self.managers:
            self.server.register(LocalManagerClient(m))
        self.server.warm_up()

    def close(self):
        self.server.close()
        for m in self.managers:
            m.close()


@pytest.fixture
def fleet(tmp_path):
    f = Fleet(tmp_path)
    yield f
    f.close()


def drain(server, want: int, timeout_s: float = 10.0) -> list[dict]:
    out: list[dict] = []
    deadline = time.monotonic() + timeout_s
    while len(out) < want and time.monotonic() < deadline:
        out.extend(server.next_batch(max_items=want, timeout_ms=200))
    assert len(out) >= want, f"drained {len(out)} of {want}"
    return out


# ---------------------------------------------------------------------------
# registration


def test_register_rejects_bad_ids(fleet):
    class Fake(LocalManagerClient):
        pass

    for bad in ("", "replica-1", "mgr-x", "mgr--", "mgr-a-b"):
        fake = ReplicaManager(bad) if False else None
        with pytest.raises(ProtocolError) as err:
            fleet.server.register(_StubClient(bad))
        assert err.value.code is ErrorCode.MALFORMED_MESSAGE


class _StubClient:
    def __init__(self, replica_id):
        self.replica_id = replica_id

    def health(self):
        raise AssertionError("never probed")


def test_register_rejects_duplicates(fleet):
    with pytest.raises(ProtocolError) as err:
        fleet.server.register(LocalManagerClient(fleet.managers[0]))
    assert err.value.code is ErrorCode.MALFORMED_MESSAGE


def test_list_replicas_shape(fleet):
    rows = fleet.server.list_replicas()
    assert len(rows) == 2
    row = rows[0]
    assert set(row) >= {
        "replica_id",
        "available",
        "state",
        "task_id",
        "episode_id",
        "pending_ticket",
        "episodes_assigned",
        "crash_count",
    }
    assert all(r["available"] for r in rows)


def test_unknown_replica_errors(fleet):
    with pytest.raises(ProtocolError) as err:
        fleet.server.async_step("mgr-ghost-9", RIGHT)
    assert err.value.code is ErrorCode.UNKNOWN_REPLICA
    with pytest.raises(ProtocolError) as err:
        fleet.server.unregister("mgr-ghost-9")
    assert err.value.code is ErrorCode.UNKNOWN_REPLICA


# ---------------------------------------------------------------------------
# batch reset


def test_batch_reset_starts_episodes(fleet):
    out = fleet.server.batch_reset(fleet.task_id, 2)
    assert len(out["items"]) == 2
    assert out["failures"] == []
    for item in out["items"]:
        assert item["episode_id"]
        assert item["observation_ref"]
        assert fleet.store.has_blob(item["observation_ref"])
        obs = item["observation"]
        assert obs["captured_at"] == 0
    ids = [item["replica_id"] for item in out["items"]]
    assert ids == sorted(ids)


def test_batch_reset_unknown_task(fleet):
    with pytest.raises(ProtocolError) as err:
        fleet.server.batch_reset("t-ghost", 1)
    assert err.value.code is ErrorCode.UNKNOWN_TASK


def test_batch_reset_insufficient_idle_reports_available(fleet):
    fleet.server.batch_reset(fleet.task_id, 2)
    with pytest.raises(ProtocolError) as err:
        fleet.server.batch_reset(fleet.task_id, 1)
    assert err.value.code is ErrorCode.REPLICA_BUSY
    assert err.value.detail == {"available": 0}


def test_batch_reset_seeds_are_applied(fleet):
    out = fleet.server.batch_reset(fleet.task_id, 2, seeds=[11, 22])
    seeds = sorted(item["episode_seed"] for item in out["items"])
    assert seeds == [11, 22]


def test_batch_reset_balances_by_episode_count(tmp_path):
    f = Fleet(tmp_path, n=3)
    try:
        first = f.server.batch_reset(f.task_id, 1)["items"][0]["replica_id"]
        # finish that episode so the replica is idle again
        t = f.server.async_step(first, Action("terminate", {}))
        drain(f.server, 1)
        # the next single reset must pick a replica with fewer episodes
        second = f.server.batch_reset(f.task_id, 1)["items"][0]["replica_id"]
        assert second != first
    finally:
        f.close()


# ---------------------------------------------------------------------------
# async step, tickets, batching


def test_async_step_roundtrip(fleet):
    items = fleet.server.batch_reset(fleet.task_id, 1)["items"]
    rid = items[0]["replica_id"]
    ticket = fleet.server.async_step(rid, RIGHT, thought="probe")["ticket"]
    out = drain(fleet.server, 1)[0]
    assert out["ticket"] == ticket
    assert out["replica_id"] == rid
    assert out["turn"] == 0  # index of the turn record this step produced
    assert out["info"]["turn"] == 1  # episode turn counter after the action
    assert out["reward"] == 0.0
    assert not out["done"]
    assert fleet.store.has_blob(out["observation_ref"])
    polled = fleet.server.poll(ticket)
    assert polled["status"] == "done"
    assert polled["outcome"]["turn"] == 0


def test_pending_depth_is_one(fleet):
    slow_task = make_task(task_id="t-slow", latency_base_ms=400.0)
    f2 = None
    rid = fleet.server.batch_reset(fleet.task_id, 1)["items"][0]["replica_id"]
    fleet.server.async_step(rid, RIGHT)
    with pytest.raises(ProtocolError) as err:
        fleet.server.async_step(rid, RIGHT)
    assert err.value.code is ErrorCode.REPLICA_BUSY
    assert "ticket" in (err.value.detail or {})
    drain(fleet.server, 1)
    # slot is free again once the outcome is delivered
    fleet.server.async_step(rid, RIGHT)
    drain(fleet.server, 1)


def test_step_without_episode_is_episode_done(fleet):
    rid = fleet.server.list_replicas()[0]["replica_id"]
    with pytest.raises(ProtocolError) as err:
        fleet.server.async_step(rid, RIGHT)
    assert err.value.code is ErrorCode.EPISODE_DONE


def test_outcomes_fifo_exactly_once(tmp_path):
    f = Fleet(tmp_path, n=4)
    try:
        items = f.server.batch_reset(f.task_id, 4)["items"]
        tickets = set()
        for round_no in range(5):
            for item in items:
                tickets.add(f.server.async_step(item["replica_id"], RIGHT)["ticket"])
            outs = drain(f.server, 4)
            got = {o["ticket"] for o in outs}
            assert got <= tickets
        all_outs: list = []
        assert len(tickets) == 20
        # nothing left in the queue: every ticket was delivered exactly once
        assert f.server.next_batch(max_items=64, timeout_ms=50) == []
    finally:
        f.close()


def test_poll_unknown_ticket(fleet):
    with pytest.raises(ProtocolError) as err:
        fleet.server.poll("t-nope-00000001")
    assert err.value.code is ErrorCode.UNKNOWN_TICKET


def test_resolved_tickets_pruned_after_ttl(tmp_path):
    f = Fleet(tmp_path, ticket_ttl_s=0.2, poll_interval_ms=50.0)
    try:
        rid = f.server.batch_reset(f.task_id, 1)["items"][0]["replica_id"]
        ticket = f.server.async_step(rid, RIGHT)["ticket"]
        drain(f.server, 1)
        assert f.server.poll(ticket)["status"] == "done"
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            try:
                f.server.poll(ticket)
                time.sleep(0.05)
            except ProtocolError as err:
                assert err.code is ErrorCode.UNKNOWN_TICKET
                break
        else:
            raise AssertionError("resolved ticket never pruned")
    finally:
        f.close()


# ---------------------------------------------------------------------------
# episode accounting


def test_completed_episode_recorded_with_all_turns(fleet):
    item = fleet.server.batch_reset(fleet.task_id, 1, seeds=[5])["items"][0]
    rid = item["replica_id"]
    outs = []
    for _ in range(3):
        fleet.server.async_step(rid, RIGHT, thought="wander")
        outs += drain(fleet.server, 1)
    fleet.server.async_step(rid, Action("terminate", {}))
    outs += drain(fleet.server, 1)
    assert outs[-1]["done"]
    ep = fleet.store.read_episode(item["episode_id"])
    assert ep.status is EpisodeStatus.COMPLETE
    assert len(ep.turns) == 4
    assert ep.episode_seed == 5
    assert ep.turns[0].thought == "wander"
    # turn i stores the frame the agent saw before acting: the reset frame
    # for turn 0, then each outcome's frame feeds the following turn
    assert ep.first_observation_ref == item["observation_ref"]
    assert ep.turns[0].observation_ref == item["observation_ref"]
    for i in range(1, 4):
        assert ep.turns[i].observation_ref == outs[i - 1]["observation_ref"]
    assert ep.final_observation_ref == outs[-1]["observation_ref"]


def test_get_trajectory_wire_shape(fleet):
    item = fleet.server.batch_reset(fleet.task_id, 1)["items"][0]
    fleet.server.async_step(item["replica_id"], Action("terminate", {}))
    drain(fleet.server, 1)
    data = fleet.server.get_trajectory(item["episode_id"])
    assert data["episode_id"] == item["episode_id"]
    assert data["status"] == "COMPLETE"
    assert len(data["turns"]) == 1
    with pytest.raises(ProtocolError) as err:
        fleet.server.get_trajectory("ep-nope")
    assert err.value.code is ErrorCode.UNKNOWN_TASK or err.value.code is ErrorCode.MALFORMED_MESSAGE


def test_crash_during_step_aborts_episode(tmp_path):
    t = make_task(task_id="t-crashy", crash_per_step=1.0)
    f = Fleet(tmp_path, n=1, tasks={t.task_id: t}, poll_interval_ms=50.0)
    try:
        item = f.server.batch_reset(t.task_id, 1)["items"][0]
        f.server.async_step(item["replica_id"], RIGHT)
        out = drain(f.server, 1)[0]
        assert out["aborted"] is True
        assert out["error"]["code"] == "REPLICA_CRASHED"
        assert out["episode_id"] == item["episode_id"]
        ep = f.store.read_episode(item["episode_id"])
        assert ep.status is EpisodeStatus.ABORTED
    finally:
        f.close()


def test_crash_between_steps_aborts_via_health_poll(tmp_path):
    f = Fleet(tmp_path, n=1, poll_interval_ms=40.0)
    try:
        item = f.server.batch_reset(f.task_id, 1)["items"][0]
        f.managers[0].crash_now("chaos")
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            try:
                ep = f.store.read_episode(item["episode_id"])
                if ep.status is EpisodeStatus.ABORTED:
                    break
            except ProtocolError:
                pass
            time.sleep(0.05)
        else:
            raise AssertionError("health poller never aborted the episode")
    finally:
        f.close()


def test_unregister_aborts_open_episode(fleet):
    item = fleet.server.batch_reset(fleet.task_id, 2)["items"][0]
    fleet.server.unregister(item["replica_id"])
    ep = fleet.store.read_episode(item["episode_id"])
    assert ep.status is EpisodeStatus.ABORTED
    assert len(fleet.server.list_replicas()) == 1


def test_close_aborts_open_episodes(tmp_path):
    f = Fleet(tmp_path)
    items = f.server.batch_reset(f.task_id, 2)["items"]
    f.close()
    for item in items:
        ep = f.store.read_episode(item["episode_id"])
        assert ep.status is EpisodeStatus.ABORTED


def test_episode_conservation_over_mixed_outcomes(tmp_path):
    """opened == closed once each, across complete/truncate/abort paths."""
    t = make_task(task_id="t-mix", step_limit=2)
    f = Fleet(tmp_path, n=3, tasks={t.task_id: t}, poll_interval_ms=50.0)
    opened: list[str] = []
    try:
        for round_no in range(6):
            items = f.server.batch_reset(t.task_id, 3)["items"]
            opened += [i["episode_id"] for i in items]
            # replica 0 terminates, replica 1 truncates, replica 2 crashes
            f.server.async_step(items[0]["replica_id"], Action("terminate", {}))
            f.server.async_step(items[1]["replica_id"], RIGHT)
            f.managers[2].crash_now("chaos")
            outs = drain(f.server, 2)
            f.server.async_step(items[1]["replica_id"], RIGHT)
            drain(f.server, 1)
            # wait for the crashed replica to be recovered and idle again
            deadline = time.monotonic() + 10.0
            while time.monotonic() < deadline:
                rows = {r["replica_id"]: r for r in f.server.list_replicas()}
                if all(r["available"] and r["episode_id"] is None for r in rows.values()):
                    break
                time.sleep(0.05)
            else:
                raise AssertionError("fleet never settled")
    finally:
        f.close()
    assert len(opened) == 18
    assert len(set(opened)) == 18
    by_status: dict[str, int] = {}
    for eid in opened:
        ep = f.store.read_episode(eid)
        assert ep.closed, f"{eid} never closed"
        by_status[ep.status.value] = by_status.get(ep.status.value, 0) + 1
    assert by_status["COMPLETE"] == 6
    assert by_status["TRUNCATED"] == 6
    assert by_status["ABORTED"] == 6
    assert f.store.integrity_report()["problems"] == []


# ---------------------------------------------------------------------------
# metrics


def test_metrics_shape_and_counters(fleet):
    m0 = fleet.server.metrics()
    assert m0["steps_total"] == 0
    assert m0["replicas_registered"] == 2
    assert m0["replicas_available"] == 2
    for _ in range(2):  # the windowed rate needs at least two finished episodes
        item = fleet.server.batch_reset(fleet.task_id, 1)["items"][0]
        fleet.server.async_step(item["replica_id"], RIGHT)
        drain(fleet.server, 1)
        fleet.server.async_step(item["replica_id"], Action("terminate", {}))
        drain(fleet.server, 1)
    m1 = fleet.server.metrics()
    assert m1["steps_total"] == 4
    assert m1["episodes_total"] == 2
    assert m1["episodes_by_status"]["COMPLETE"] == 2
    assert m1["episodes_active"] == 0
    assert m1["steps_per_sec"] > 0
    assert m1["trajectories_per_min"] > 0


def test_metrics_rate_closed_form(tmp_path):
    """rate = (n - 1) / span of the event window, zero below two events."""
    f = Fleet(tmp_path)
    try:
        assert f.server.metrics()["steps_per_sec"] == 0.0
        item = f.server.batch_reset(f.task_id, 1)["items"][0]
        f.server.async_step(item["replica_id"], RIGHT)
        drain(f.server, 1)
        assert f.server.metrics()["steps_per_sec"] == 0.0  # single event, no span
        f.server.async_step(item["replica_id"], RIGHT)
        drain(f.server, 1)
        assert f.server.metrics()["steps_per_sec"] > 0.0
    finally:
        f.close()


def test_aborted_episodes_excluded_from_trajectory_rate(tmp_path):
    t = make_task(task_id="t-crashy", crash_per_step=1.0)
    f = Fleet(tmp_path, n=1, tasks={t.task_id: t})
    try:
        for _ in range(2):
            item = f.server.batch_reset(t.task_id, 1)["items"][0]
            f.server.async_step(item["replica_id"], RIGHT)
            drain(f.server, 1)
            deadline = time.monotonic() + 5.0
            while time.monotonic() < deadline:
                rows = f.server.list_replicas()
                if rows[0]["available"] and rows[0]["episode_id"] is None:
                    break
                time.sleep(0.05)
        m = f.server.metrics()
        assert m["episodes_by_status"]["ABORTED"] == 2
        assert m["trajectories_per_min"] == 0.0
    finally:
        f.close()
