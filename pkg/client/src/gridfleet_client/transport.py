"""HTTP transport with a narrow seam for recording and stubbing."""

from __future__ import annotations

from typing import Protocol

import requests

from .wire import ServerUnreachable


class Transport(Protocol):
    def request(
        self, method: str, path: str, body: bytes | None, timeout_s: float
    ) -> tuple[int, bytes]: ...


class HttpTransport:
    """Real transport over a pooled requests session."""

    def __init__(self, endpoint: str) -> None:
        self.endpoint = endpoint.rstrip("/")
        self._session = requests.Session()

    def request(
        self, method: str, path: str, body: bytes | None, timeout_s: float
    ) -> tuple[int, bytes]:
        try:
            resp = self._session.request(
                method,
                f"{self.endpoint}{path}",
                data=body,
                timeout=timeout_s,
                headers={"Content-Type": "application/json"} if body else None,
            )
        except requests.RequestException as exc:
            raise ServerUnreachable(f"{method} {path}: {exc}") from None
        return resp.status_code, resp.content

    def close(self) -> None:
        self._session.close()


class RecordingTransport:
    """Wraps a transport and logs every exchange; used by the conformance
    suite to pin the exact request bytes the SDK emits."""

    def __init__(self, inner: Transport) -> None:
        self.inner = inner
        self.log: list[dict] = []

    def request(
        self, method: str, path: str, body: bytes | None, timeout_s: float
    ) -> tuple[int, bytes]:
        status, reply = self.inner.request(method, path, body, timeout_s)
        self.log.append(
            {
                "method": method,
                "path": path,
                "request_body": body,
                "status": status,
                "response_body": reply,
            }
        )
        return status, reply
