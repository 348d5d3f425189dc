"""Client-side wire conventions for the gridfleet data server.

This package never imports the server; everything here is written
against the published protocol: canonical JSON envelopes
``{"v": 1, "type": ..., "data": {...}}``, UTF-8, sorted keys, compact
separators, ASCII-escaped.  The conformance suite pins the bytes this
module produces against golden transcripts recorded from a live server.
"""

from __future__ import annotations

import json
from typing import Any

WIRE_VERSION = 1


def canonical_dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def encode_message(msg_type: str, data: dict[str, Any]) -> bytes:
    return canonical_dumps({"v": WIRE_VERSION, "type": msg_type, "data": data}).encode(
        "utf-8"
    )


def decode_message(body: bytes) -> tuple[str, dict[str, Any]]:
    """Parse an envelope; raises EngineError for a server error payload."""
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EngineError(
            "MALFORMED_MESSAGE", f"server reply is not valid JSON: {exc}"
        ) from None
    if not isinstance(obj, dict) or obj.get("v") != WIRE_VERSION:
        raise EngineError("MALFORMED_MESSAGE", "server reply has no valid envelope")
    msg_type = obj.get("type")
    data = obj.get("data")
    if not isinstance(msg_type, str) or not isinstance(data, dict):
        raise EngineError("MALFORMED_MESSAGE", "server reply envelope is incomplete")
    return msg_type, data


class ServerUnreachable(ConnectionError):
    """The server could not be reached at all.

    Deliberately distinct from an empty `next` result: a timeout with no
    completed work is a normal empty batch, while this means the
    connection itself failed.
    """


class EngineError(Exception):
    """An error envelope returned by the server."""

    def __init__(
        self,
        code: str,
        message: str,
        detail: dict[str, Any] | None = None,
        http_status: int | None = None,
    ) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.detail = detail or {}
        self.http_status = http_status

    @classmethod
    def from_wire(cls, data: dict[str, Any], http_status: int | None = None) -> EngineError:
        return cls(
            str(data.get("code", "MALFORMED_MESSAGE")),
            str(data.get("message", "")),
            data.get("detail") if isinstance(data.get("detail"), dict) else None,
            http_status,
        )


class ValidationError(ValueError):
    """A request rejected client-side, before anything hits the wire."""


# Action kinds and the payload fields each one requires, mirroring the
# server's schema.  The server stays the authority on value types and
# ranges; this is the pre-flight structural check.
ACTION_PAYLOAD_FIELDS: dict[str, tuple[str, ...]] = {
    "key_press": ("key",),
    "type_text": ("text",),
    "mouse_move": ("x", "y"),
    "mouse_click": ("x", "y", "button"),
    "scroll": ("dx", "dy"),
    "api_call": ("name",),
    "noop": (),
    "terminate": (),
}


def validate_action(action: Any) -> dict[str, Any]:
    """Check an action dict locally; returns it unchanged if well formed."""
    if not isinstance(action, dict):
        raise ValidationError(f"action must be a dict, got {type(action).__name__}")
    kind = action.get("kind")
    if kind not in ACTION_PAYLOAD_FIELDS:
        raise ValidationError(f"unknown action kind {kind!r}")
    payload = action.get("payload")
    if not isinstance(payload, dict):
        raise ValidationError("action payload must be a dict")
    missing = [f for f in ACTION_PAYLOAD_FIELDS[kind] if f not in payload]
    if missing:
        raise ValidationError(f"action {kind!r} payload missing {missing}")
    return action
