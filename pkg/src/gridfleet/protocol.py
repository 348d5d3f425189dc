"""Wire protocol: message envelope, canonical JSON, actions, observations.

Every value that crosses a process boundary is canonical JSON: UTF-8,
keys sorted lexicographically, no insignificant whitespace, binary
payloads (screenshots) base64-encoded.  Messages travel in a versioned
envelope ``{"v": 1, "type": ..., "data": ...}``.  Decoding rejects
messages with missing required fields and warns (but accepts) on
unknown fields so older peers keep working against newer ones.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

# Hard cap on a single encoded observation message.  Anything larger is
# a configuration mistake (oversized screen geometry), not a payload to
# ship.
MAX_OBSERVATION_BYTES = 4 * 1024 * 1024

MAX_TYPE_TEXT_BYTES = 8192

MOUSE_BUTTONS = ("left", "right", "middle")


class ErrorCode(str, enum.Enum):
    """Stable error vocabulary shared by every endpoint."""

    REPLICA_BUSY = "REPLICA_BUSY"
    REPLICA_CRASHED = "REPLICA_CRASHED"
    REPLICA_RECOVERING = "REPLICA_RECOVERING"
    EPISODE_DONE = "EPISODE_DONE"
    UNKNOWN_REPLICA = "UNKNOWN_REPLICA"
    UNKNOWN_TASK = "UNKNOWN_TASK"
    UNKNOWN_TICKET = "UNKNOWN_TICKET"
    MALFORMED_MESSAGE = "MALFORMED_MESSAGE"
    EVALUATOR_FAILURE = "EVALUATOR_FAILURE"
    TIMEOUT = "TIMEOUT"


class ReplicaState(str, enum.Enum):
    """Lifecycle states of a single environment replica."""

    UNCONFIGURED = "UNCONFIGURED"
    CONFIGURING = "CONFIGURING"
    READY = "READY"
    BUSY = "BUSY"
    EVALUATING = "EVALUATING"
    CRASHED = "CRASHED"
    RECOVERING = "RECOVERING"


# Transitions a healthy implementation may perform.  ``CRASHED`` is
# reachable from anywhere because faults do not wait for a quiescent
# moment.  Reconfiguring an already-configured replica re-enters
# CONFIGURING from READY.
LEGAL_TRANSITIONS: frozenset[tuple[ReplicaState, ReplicaState]] = frozenset(
    {
        (ReplicaState.UNCONFIGURED, ReplicaState.CONFIGURING),
        (ReplicaState.CONFIGURING, ReplicaState.READY),
        (ReplicaState.READY, ReplicaState.CONFIGURING),
        (ReplicaState.READY, ReplicaState.BUSY),
        (ReplicaState.BUSY, ReplicaState.READY),
        (ReplicaState.READY, ReplicaState.EVALUATING),
        (ReplicaState.EVALUATING, ReplicaState.READY),
        (ReplicaState.CRASHED, ReplicaState.RECOVERING),
        (ReplicaState.RECOVERING, ReplicaState.READY),
        (ReplicaState.RECOVERING, ReplicaState.UNCONFIGURED),
    }
    | {(s, ReplicaState.CRASHED) for s in ReplicaState if s != ReplicaState.CRASHED}
)


class EpisodeStatus(str, enum.Enum):
    """How an episode ended."""

    COMPLETE = "COMPLETE"
    TRUNCATED = "TRUNCATED"
    ABORTED = "ABORTED"


class ProtocolError(Exception):
    """Raised when a message or record fails validation.

    Carries a stable :class:`ErrorCode` plus a human-readable message and
    an optional structured detail payload.
    """

    def __init__(self, code: ErrorCode, message: str, detail: Any = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.detail = detail

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"code": self.code.value, "message": self.message}
        if self.detail is not None:
            out["detail"] = self.detail
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "ProtocolError":
        rec = check_record(
            data, required={"code", "message"}, optional={"detail"}, where="error"
        )
        try:
            code = ErrorCode(rec["code"])
        except ValueError:
            raise ProtocolError(
                ErrorCode.MALFORMED_MESSAGE, f"unknown error code {rec['code']!r}"
            ) from None
        return cls(code, str(rec["message"]), rec.get("detail"))


def malformed(message: str, detail: Any = None) -> ProtocolError:
    return ProtocolError(ErrorCode.MALFORMED_MESSAGE, message, detail)


# ---------------------------------------------------------------------------
# Canonical JSON


def canonical_dumps(obj: Any) -> str:
    """Serialize to the one canonical text form: sorted keys, compact."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_dumps(obj).encode("utf-8")


def encode_message(msg_type: str, data: Mapping[str, Any]) -> bytes:
    """Wrap ``data`` in the versioned envelope and serialize it."""
    return canonical_bytes({"v": PROTOCOL_VERSION, "type": msg_type, "data": data})


def decode_message(raw: bytes | str, expected_type: str | None = None) -> tuple[str, dict]:
    """Parse and validate an envelope; returns ``(type, data)``.

    Raises :class:`ProtocolError` with ``MALFORMED_MESSAGE`` for bad
    JSON, a missing or unsupported version, a missing type or data
    field, or a type mismatch against ``expected_type``.
    """
    try:
        obj = json.loads(raw)
    except (ValueError, TypeError) as exc:
        raise malformed(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise malformed("envelope must be a JSON object")
    env = check_record(obj, required={"v", "type", "data"}, optional=set(), where="envelope")
    if env["v"] != PROTOCOL_VERSION:
        raise malformed(f"unsupported protocol version {env['v']!r}")
    msg_type = env["type"]
    if not isinstance(msg_type, str):
        raise malformed("envelope type must be a string")
    data = env["data"]
    if not isinstance(data, dict):
        raise malformed("envelope data must be a JSON object")
    if expected_type is not None and msg_type != expected_type:
        raise malformed(f"expected message type {expected_type!r}, got {msg_type!r}")
    return msg_type, data


def check_record(
    data: Mapping[str, Any],
    required: set[str],
    optional: set[str],
    where: str,
) -> dict[str, Any]:
    """Validate field presence on a decoded record.

    Missing required fields are an error; unknown fields are logged at
    WARNING and dropped, never fatal.
    """
    if not isinstance(data, Mapping):
        raise malformed(f"{where}: expected an object")
    missing = required - data.keys()
    if missing:
        raise malformed(f"{where}: missing required field(s) {sorted(missing)}")
    known = required | optional
    unknown = [k for k in data.keys() if k not in known]
    if unknown:
        logger.warning("%s: ignoring unknown field(s) %s", where, sorted(unknown))
    return {k: data[k] for k in data.keys() if k in known}


# ---------------------------------------------------------------------------
# Actions


ACTION_PAYLOAD_FIELDS: dict[str, tuple[set[str], set[str]]] = {
    # kind -> (required payload fields, optional payload fields)
    "key_press": ({"key"}, set()),
    "type_text": ({"text"}, set()),
    "mouse_move": ({"x", "y"}, set()),
    "mouse_click": ({"x", "y", "button"}, set()),
    "scroll": ({"dx", "dy"}, set()),
    "api_call": ({"name"}, {"args"}),
    "noop": (set(), set()),
    "terminate": (set(), set()),
}

ACTION_KINDS = tuple(ACTION_PAYLOAD_FIELDS)


@dataclass(frozen=True)
class Action:
    """One agent action: a tagged payload plus an optional thought string."""

    kind: str
    payload: dict[str, Any] = field(default_factory=dict)
    thought: str | None = None

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "payload": dict(self.payload)}
        if self.thought is not None:
            out["thought"] = self.thought
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "Action":
        rec = check_record(
            data, required={"kind", "payload"}, optional={"thought"}, where="action"
        )
        action = cls(
            kind=rec["kind"],
            payload=dict(rec["payload"]) if isinstance(rec["payload"], Mapping) else rec["payload"],
            thought=rec.get("thought"),
        )
        validate_action(action)
        return action


def _require_int(payload: Mapping[str, Any], key: str, where: str) -> int:
    v = payload[key]
    # bool is an int subclass; a boolean coordinate is always a bug
    if isinstance(v, bool) or not isinstance(v, int):
        raise malformed(f"{where}: field {key!r} must be an integer")
    return v


def validate_action(
    action: Action, screen_width: int | None = None, screen_height: int | None = None
) -> None:
    """Validate an action's shape, and coordinate bounds when geometry is known.

    Raises :class:`ProtocolError` (``MALFORMED_MESSAGE``) on any violation.
    """
    if action.kind not in ACTION_PAYLOAD_FIELDS:
        raise malformed(f"unknown action kind {action.kind!r}")
    if not isinstance(action.payload, Mapping):
        raise malformed(f"action {action.kind}: payload must be an object")
    if action.thought is not None and not isinstance(action.thought, str):
        raise malformed(f"action {action.kind}: thought must be a string")
    required, optional = ACTION_PAYLOAD_FIELDS[action.kind]
    where = f"action {action.kind}"
    payload = check_record(action.payload, required=required, optional=optional, where=where)

    if action.kind == "key_press":
        if not isinstance(payload["key"], str) or not payload["key"]:
            raise malformed(f"{where}: key must be a non-empty string")
    elif action.kind == "type_text":
        text = payload["text"]
        if not isinstance(text, str):
            raise malformed(f"{where}: text must be a string")
        nbytes = len(text.encode("utf-8"))
        if nbytes > MAX_TYPE_TEXT_BYTES:
            raise malformed(
                f"{where}: text is {nbytes} bytes, limit is {MAX_TYPE_TEXT_BYTES}"
            )
    elif action.kind in ("mouse_move", "mouse_click"):
        x = _require_int(payload, "x", where)
        y = _require_int(payload, "y", where)
        if x < 0 or y < 0:
            raise malformed(f"{where}: coordinates must be non-negative")
        if screen_width is not None and x >= screen_width:
            raise malformed(f"{where}: x={x} outside screen width {screen_width}")
        if screen_height is not None and y >= screen_height:
            raise malformed(f"{where}: y={y} outside screen height {screen_height}")
        if action.kind == "mouse_click" and payload["button"] not in MOUSE_BUTTONS:
            raise malformed(
                f"{where}: button must be one of {list(MOUSE_BUTTONS)}"
            )
    elif action.kind == "scroll":
        _require_int(payload, "dx", where)
        _require_int(payload, "dy", where)
    elif action.kind == "api_call":
        if not isinstance(payload["name"], str) or not payload["name"]:
            raise malformed(f"{where}: name must be a non-empty string")
        args = payload.get("args", {})
        if not isinstance(args, Mapping):
            raise malformed(f"{where}: args must be an object")
    # noop / terminate carry no payload


# ---------------------------------------------------------------------------
# Observations and step results


@dataclass(frozen=True)
class Observation:
    """A screen capture plus structured metadata.

    ``captured_at`` is in milliseconds.  The sim backend stamps logical
    time (the episode turn number) so identical states produce identical
    observations byte for byte; a real desktop backend would stamp wall
    clock.
    """

    screenshot: bytes
    captured_at: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_wire(self) -> dict[str, Any]:
        return {
            "screenshot_b64": base64.b64encode(self.screenshot).decode("ascii"),
            "captured_at": self.captured_at,
            "metadata": self.metadata,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "Observation":
        rec = check_record(
            data,
            required={"screenshot_b64", "captured_at", "metadata"},
            optional=set(),
            where="observation",
        )
        try:
            shot = base64.b64decode(rec["screenshot_b64"], validate=True)
        except (ValueError, TypeError) as exc:
            raise malformed(f"observation: bad base64 screenshot: {exc}") from None
        captured_at = rec["captured_at"]
        if isinstance(captured_at, bool) or not isinstance(captured_at, int):
            raise malformed("observation: captured_at must be an integer")
        meta = rec["metadata"]
        if not isinstance(meta, Mapping):
            raise malformed("observation: metadata must be an object")
        return cls(screenshot=shot, captured_at=captured_at, metadata=dict(meta))


def encode_observation_message(obs: Observation) -> bytes:
    raw = encode_message("observation", obs.to_wire())
    if len(raw) > MAX_OBSERVATION_BYTES:
        raise malformed(
            f"encoded observation is {len(raw)} bytes, "
            f"limit is {MAX_OBSERVATION_BYTES}; shrink the screen geometry"
        )
    return raw


@dataclass(frozen=True)
class StepResult:
    """Outcome of applying one action."""

    observation: Observation
    reward: float
    done: bool
    info: dict[str, Any] = field(default_factory=dict)

    def to_wire(self) -> dict[str, Any]:
        return {
            "observation": self.observation.to_wire(),
            "reward": self.reward,
            "done": self.done,
            "info": self.info,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "StepResult":
        rec = check_record(
            data,
            required={"observation", "reward", "done", "info"},
            optional=set(),
            where="step_result",
        )
        reward = rec["reward"]
        if isinstance(reward, bool) or not isinstance(reward, (int, float)):
            raise malformed("step_result: reward must be a number")
        if not isinstance(rec["done"], bool):
            raise malformed("step_result: done must be a boolean")
        if not isinstance(rec["info"], Mapping):
            raise malformed("step_result: info must be an object")
        return cls(
            observation=Observation.from_wire(rec["observation"]),
            reward=float(reward),
            done=rec["done"],
            info=dict(rec["info"]),
        )


@dataclass(frozen=True)
class HealthReport:
    """Snapshot of a replica's externally visible condition."""

    replica_id: str
    state: ReplicaState
    task_id: str | None
    episode_active: bool
    turn: int
    uptime_s: float
    crash_count: int
    last_transition_at: float

    def to_wire(self) -> dict[str, Any]:
        return {
            "replica_id": self.replica_id,
            "state": self.state.value,
            "task_id": self.task_id,
            "episode_active": self.episode_active,
            "turn": self.turn,
            "uptime_s": self.uptime_s,
            "crash_count": self.crash_count,
            "last_transition_at": self.last_transition_at,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "HealthReport":
        rec = check_record(
            data,
            required={
                "replica_id",
                "state",
                "task_id",
                "episode_active",
                "turn",
                "uptime_s",
                "crash_count",
                "last_transition_at",
            },
            optional=set(),
            where="health",
        )
        try:
            state = ReplicaState(rec["state"])
        except ValueError:
            raise malformed(f"health: unknown state {rec['state']!r}") from None
        return cls(
            replica_id=rec["replica_id"],
            state=state,
            task_id=rec["task_id"],
            episode_active=bool(rec["episode_active"]),
            turn=int(rec["turn"]),
            uptime_s=float(rec["uptime_s"]),
            crash_count=int(rec["crash_count"]),
            last_transition_at=float(rec["last_transition_at"]),
        )
