"""Batched dataloader over a gridfleet data server.

The handle mirrors the training-loop surface: ``next`` drains completed
step outcomes, ``async_step`` files work and returns tickets without
waiting, ``batch_reset`` opens episodes.  All calls go through the
canonical wire schemas; the only client-side state is the set of open
tickets.  One handle serves one rollout loop; concurrent loops need
separate handles.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence
from urllib.parse import quote, urlencode

from .transport import HttpTransport, Transport
from .wire import (
    EngineError,
    ValidationError,
    decode_message,
    encode_message,
    validate_action,
)

# generous floor so short server-side waits never race the socket timeout
_MIN_HTTP_TIMEOUT_S = 10.0


@dataclass
class BatchedState:
    """One replica's latest state, decoded from a reset item or a step
    outcome.  ``error`` is set instead of an observation when the item
    failed; rollout code counts those rather than raising."""

    replica_id: str
    episode_id: str | None
    steps_taken: int
    screenshot: bytes | None
    captured_at: int | None
    metadata: dict[str, Any]
    reward: float | None
    done: bool
    info: dict[str, Any] = field(default_factory=dict)
    ticket: str | None = None
    observation_ref: str | None = None
    error: dict[str, Any] | None = None
    aborted: bool = False
    task_id: str | None = None  # filled by the rollout driver, not the wire

    @property
    def ok(self) -> bool:
        return self.error is None

    @classmethod
    def from_reset_item(cls, item: dict[str, Any], task_id: str | None = None) -> BatchedState:
        shot, captured, meta = _decode_observation(item.get("observation"))
        return cls(
            replica_id=item["replica_id"],
            episode_id=item.get("episode_id"),
            steps_taken=0,
            screenshot=shot,
            captured_at=captured,
            metadata=meta,
            reward=None,
            done=False,
            observation_ref=item.get("observation_ref"),
            error=item.get("error"),
            task_id=task_id,
        )

    @classmethod
    def from_outcome(cls, outcome: dict[str, Any]) -> BatchedState:
        shot, captured, meta = _decode_observation(outcome.get("observation"))
        turn = outcome.get("turn")
        return cls(
            replica_id=outcome["replica_id"],
            episode_id=outcome.get("episode_id"),
            steps_taken=int(turn) + 1 if turn is not None else 0,
            screenshot=shot,
            captured_at=captured,
            metadata=meta,
            reward=outcome.get("reward"),
            done=bool(outcome.get("done", False)),
            info=outcome.get("info", {}),
            ticket=outcome.get("ticket"),
            observation_ref=outcome.get("observation_ref"),
            error=outcome.get("error"),
            aborted=bool(outcome.get("aborted", False)),
        )


def _decode_observation(
    obs: dict[str, Any] | None,
) -> tuple[bytes | None, int | None, dict[str, Any]]:
    if not isinstance(obs, dict):
        return None, None, {}
    b64 = obs.get("screenshot_b64")
    shot = base64.b64decode(b64) if isinstance(b64, str) else None
    meta = obs.get("metadata")
    return shot, obs.get("captured_at"), meta if isinstance(meta, dict) else {}


class DataloaderHandle:
    def __init__(
        self,
        endpoint: str,
        *,
        batch_size: int = 16,
        timeout_ms: float = 1000.0,
        transport: Transport | None = None,
    ) -> None:
        if batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if timeout_ms < 0:
            raise ValidationError("timeout_ms must be non-negative")
        self.endpoint = endpoint
        self.batch_size = batch_size
        self.timeout_ms = timeout_ms
        self.transport: Transport = transport or HttpTransport(endpoint)
        self.open_tickets: set[str] = set()

    # -- wire plumbing ------------------------------------------------

    def _post(self, path: str, msg_type: str, data: dict[str, Any], timeout_s: float | None = None) -> dict[str, Any]:
        body = encode_message(msg_type, data)
        status, reply = self.transport.request(
            "POST", path, body, timeout_s or _MIN_HTTP_TIMEOUT_S
        )
        return self._decode(status, reply)

    def _get(self, path: str) -> dict[str, Any]:
        status, reply = self.transport.request("GET", path, None, _MIN_HTTP_TIMEOUT_S)
        return self._decode(status, reply)

    @staticmethod
    def _decode(status: int, reply: bytes) -> dict[str, Any]:
        msg_type, data = decode_message(reply)
        if msg_type == "error":
            raise EngineError.from_wire(data, status)
        return data

    # -- dataloader surface -------------------------------------------

    def next(
        self, max_items: int | None = None, timeout_ms: float | None = None
    ) -> list[BatchedState]:
        """Drain up to ``max_items`` completed outcomes; blocks server-side
        up to ``timeout_ms`` and returns an empty list when nothing
        finished in time."""
        n = self.batch_size if max_items is None else max_items
        if n < 1:
            raise ValidationError("max_items must be positive")
        wait_ms = self.timeout_ms if timeout_ms is None else timeout_ms
        data = self._post(
            "/next_batch",
            "next_batch",
            {"max_items": n, "timeout_ms": wait_ms},
            timeout_s=max(_MIN_HTTP_TIMEOUT_S, wait_ms / 1000.0 + 5.0),
        )
        states = [BatchedState.from_outcome(o) for o in data.get("items", [])]
        for s in states:
            if s.ticket:
                self.open_tickets.discard(s.ticket)
        return states

    def __iter__(self) -> DataloaderHandle:
        return self

    def __next__(self) -> list[BatchedState]:
        return self.next()

    def async_step(
        self,
        batched_actions: Sequence[tuple[str, dict[str, Any]]],
        thoughts: Sequence[str | None] | None = None,
    ) -> list[str]:
        """File one step per (replica_id, action) pair; returns tickets in
        order.  Every action is validated locally before anything is
        transmitted, and the whole batch is rejected if any item fails."""
        if not batched_actions:
            raise ValidationError("batched_actions must not be empty")
        if thoughts is not None and len(thoughts) != len(batched_actions):
            raise ValidationError("thoughts must match batched_actions one to one")
        for _, action in batched_actions:
            validate_action(action)
        tickets: list[str] = []
        for i, (replica_id, action) in enumerate(batched_actions):
            payload: dict[str, Any] = {"replica_id": replica_id, "action": action}
            thought = thoughts[i] if thoughts is not None else None
            if thought is not None:
                payload["thought"] = thought
            data = self._post("/async_step", "async_step", payload)
            ticket = str(data["ticket"])
            tickets.append(ticket)
            self.open_tickets.add(ticket)
        return tickets

    def batch_reset(
        self, task_id: str, count: int, seeds: Iterable[int] | None = None
    ) -> tuple[list[BatchedState], list[dict[str, Any]]]:
        """Open ``count`` episodes on idle replicas; returns (states,
        failures) where states carry the first observations."""
        if count < 1:
            raise ValidationError("count must be positive")
        data: dict[str, Any] = {"task_id": task_id, "count": count}
        if seeds is not None:
            data["seeds"] = list(seeds)
        out = self._post("/batch_reset", "batch_reset", data)
        states = [
            BatchedState.from_reset_item(item, task_id) for item in out.get("items", [])
        ]
        return states, out.get("failures", [])

    def poll(self, ticket: str) -> dict[str, Any]:
        return self._post("/poll", "poll", {"ticket": ticket})

    # -- catalog and store --------------------------------------------

    def task_ids(self) -> list[str]:
        return list(self._get("/tasks")["task_ids"])

    def task(self, task_id: str) -> dict[str, Any]:
        return self._get(f"/tasks/{quote(task_id)}")

    def replicas(self) -> list[dict[str, Any]]:
        return list(self._get("/replicas")["replicas"])

    def metrics(self) -> dict[str, Any]:
        return self._get("/metrics")

    def trajectory(self, episode_id: str) -> dict[str, Any]:
        return self._get(f"/trajectories/{quote(episode_id)}")

    def query(
        self,
        *,
        task_id: str | None = None,
        domain: str | None = None,
        status: str | None = None,
        min_reward: float | None = None,
        since_ms: int | None = None,
        limit: int | None = None,
    ) -> list[dict[str, Any]]:
        params = {
            k: v
            for k, v in (
                ("task_id", task_id),
                ("domain", domain),
                ("status", status),
                ("min_reward", min_reward),
                ("since_ms", since_ms),
                ("limit", limit),
            )
            if v is not None
        }
        path = "/query" + (f"?{urlencode(params)}" if params else "")
        return list(self._get(path)["episodes"])

    def fetch_blob(self, ref: str) -> bytes:
        status, reply = self.transport.request(
            "GET", f"/blobs/{quote(ref)}", None, _MIN_HTTP_TIMEOUT_S
        )
        if status != 200:
            _, data = decode_message(reply)
            raise EngineError.from_wire(data, status)
        return reply

    def close(self) -> None:
        closer = getattr(self.transport, "close", None)
        if closer is not None:
            closer()
