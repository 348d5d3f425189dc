"""HTTP transport for managers and the data server.

Every request and response body is a protocol envelope (canonical
JSON), except blob downloads, which are raw PNG bytes.  Servers are
stdlib ``ThreadingHTTPServer`` instances: one OS thread per in-flight
request is exactly the concurrency model the rest of the engine
already assumes, and it keeps the wire layer dependency-free.

Endpoints, manager role::

    POST /configure   task spec            -> health
    POST /reset       {seed?}              -> reset_result
    POST /step        {action, thought?}   -> step_result
    POST /evaluate    {}                   -> evaluate_result
    GET  /health                           -> health

Endpoints, data-server role::

    POST /register    {replica_id, base_url}        -> registered
    POST /unregister  {replica_id}                  -> registered
    GET  /replicas                                  -> replica_list
    POST /batch_reset {task_id, count, seeds?}      -> batch_reset_result
    POST /async_step  {replica_id, action, thought?} -> ticket
    POST /next_batch  {max_items?, timeout_ms?}     -> batch
    POST /poll        {ticket}                      -> poll_result
    GET  /metrics                                   -> metrics
    GET  /tasks                                     -> task_list
    GET  /tasks/<task_id>                           -> task
    GET  /trajectories/<episode_id>                 -> trajectory
    GET  /query?...                                 -> query_result
    GET  /blobs/<ref>                               -> image/png bytes

Errors travel as an ``error`` envelope with the standard code
vocabulary, mapped onto HTTP status codes.
"""

from __future__ import annotations

import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping
from urllib.parse import parse_qs, urlparse

import requests

from .manager import ManagerClient, ReplicaManager
from .protocol import (
    Action,
    ErrorCode,
    HealthReport,
    MAX_OBSERVATION_BYTES,
    Observation,
    ProtocolError,
    StepResult,
    check_record,
    decode_message,
    encode_message,
    malformed,
)
from .server import DataServer
from .tasks import TaskSpec

logger = logging.getLogger(__name__)

MAX_REQUEST_BYTES = 8 * 1024 * 1024

_HTTP_STATUS: dict[ErrorCode, int] = {
    ErrorCode.MALFORMED_MESSAGE: 400,
    ErrorCode.UNKNOWN_REPLICA: 404,
    ErrorCode.UNKNOWN_TASK: 404,
    ErrorCode.UNKNOWN_TICKET: 404,
    ErrorCode.REPLICA_BUSY: 409,
    ErrorCode.REPLICA_CRASHED: 409,
    ErrorCode.REPLICA_RECOVERING: 409,
    ErrorCode.EPISODE_DONE: 409,
    ErrorCode.EVALUATOR_FAILURE: 500,
    ErrorCode.TIMEOUT: 504,
}


class _Handler(BaseHTTPRequestHandler):
    """Envelope plumbing shared by both server roles."""

    protocol_version = "HTTP/1.1"
    server_version = "gridfleet"
    # buffer the whole response and push it in one segment; the default
    # unbuffered write-per-header interacts with delayed ACK on keep-alive
    # connections and stalls every reply by tens of milliseconds
    wbufsize = -1
    disable_nagle_algorithm = True

    def log_message(self, fmt: str, *args: Any) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _read_data(self, expected_type: str) -> dict[str, Any]:
        length = int(self.headers.get("Content-Length", 0))
        if length > MAX_REQUEST_BYTES:
            raise malformed(f"request body of {length} bytes exceeds the cap")
        raw = self.rfile.read(length) if length else b"{}"
        if not length:
            raise malformed("request body required")
        _, data = decode_message(raw, expected_type)
        return data

    def _send_bytes(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_envelope(self, msg_type: str, data: Mapping[str, Any], status: int = 200) -> None:
        body = encode_message(msg_type, data)
        if len(body) > MAX_OBSERVATION_BYTES:
            body = encode_message(
                "error",
                {
                    "code": ErrorCode.MALFORMED_MESSAGE.value,
                    "message": f"response of {len(body)} bytes exceeds the message cap",
                },
            )
            status = 500
        self._send_bytes(status, body, "application/json")

    def _send_error(self, err: ProtocolError) -> None:
        self._send_envelope("error", err.to_wire(), _HTTP_STATUS.get(err.code, 500))

    def _dispatch(self, routes: dict[str, Callable[[], None]]) -> None:
        path = urlparse(self.path).path
        try:
            handler = routes.get(path)
            if handler is not None:
                handler()
                return
            prefix_handler = getattr(self, "_route_prefix", None)
            if prefix_handler is not None and prefix_handler(path):
                return
            raise ProtocolError(
                ErrorCode.MALFORMED_MESSAGE, f"no such endpoint {path!r}"
            )
        except ProtocolError as err:
            self._send_error(err)
        except BrokenPipeError:
            pass
        except Exception as exc:
            logger.exception("handler for %s failed", self.path)
            self._send_envelope(
                "error",
                {"code": ErrorCode.MALFORMED_MESSAGE.value, "message": f"internal error: {exc}"},
                500,
            )


class ManagerHandler(_Handler):
    manager: ReplicaManager  # set by the server factory

    def do_POST(self) -> None:  # noqa: N802 (stdlib naming)
        self._dispatch(
            {
                "/configure": self._configure,
                "/reset": self._reset,
                "/step": self._step,
                "/evaluate": self._evaluate,
            }
        )

    def do_GET(self) -> None:  # noqa: N802
        self._dispatch({"/health": self._health})

    def _configure(self) -> None:
        task = TaskSpec.from_wire(self._read_data("configure"))
        report = self.manager.configure(task)
        self._send_envelope("health", report.to_wire())

    def _reset(self) -> None:
        data = check_record(
            self._read_data("reset"), required=set(), optional={"seed"}, where="reset"
        )
        seed = data.get("seed")
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
            raise malformed("reset: seed must be an integer")
        obs, info = self.manager.reset(seed)
        self._send_envelope(
            "reset_result", {"observation": obs.to_wire(), "info": info}
        )

    def _step(self) -> None:
        data = check_record(
            self._read_data("step"),
            required={"action"},
            optional={"thought"},
            where="step",
        )
        action = Action.from_wire(data["action"])
        result = self.manager.step(action)
        self._send_envelope("step_result", result.to_wire())

    def _evaluate(self) -> None:
        self._read_data("evaluate")
        score, success = self.manager.evaluate_now()
        self._send_envelope("evaluate_result", {"score": score, "success": success})

    def _health(self) -> None:
        self._send_envelope("health", self.manager.health().to_wire())


class DataServerHandler(_Handler):
    data_server: DataServer  # set by the server factory

    def do_POST(self) -> None:  # noqa: N802
        self._dispatch(
            {
                "/register": self._register,
                "/unregister": self._unregister,
                "/batch_reset": self._batch_reset,
                "/async_step": self._async_step,
                "/next_batch": self._next_batch,
                "/poll": self._poll,
            }
        )

    def do_GET(self) -> None:  # noqa: N802
        self._dispatch(
            {
                "/replicas": self._replicas,
                "/metrics": self._metrics,
                "/tasks": self._tasks,
                "/query": self._query,
            }
        )

    def _route_prefix(self, path: str) -> bool:
        if path.startswith("/blobs/"):
            self._blob(path.removeprefix("/blobs/"))
            return True
        if path.startswith("/trajectories/"):
            self._trajectory(path.removeprefix("/trajectories/"))
            return True
        if path.startswith("/tasks/"):
            self._task(path.removeprefix("/tasks/"))
            return True
        return False

    def _register(self) -> None:
        data = check_record(
            self._read_data("register"),
            required={"replica_id", "base_url"},
            optional={"timeout_s"},
            where="register",
        )
        client = HttpManagerClient(
            str(data["base_url"]),
            replica_id=str(data["replica_id"]),
            timeout_s=float(data.get("timeout_s", 30.0)),
        )
        self._send_envelope("registered", self.data_server.register(client))

    def _unregister(self) -> None:
        data = check_record(
            self._read_data("unregister"),
            required={"replica_id"},
            optional=set(),
            where="unregister",
        )
        self._send_envelope(
            "registered", self.data_server.unregister(str(data["replica_id"]))
        )

    def _batch_reset(self) -> None:
        data = check_record(
            self._read_data("batch_reset"),
            required={"task_id", "count"},
            optional={"seeds"},
            where="batch_reset",
        )
        count = data["count"]
        if isinstance(count, bool) or not isinstance(count, int):
            raise malformed("batch_reset: count must be an integer")
        seeds = data.get("seeds")
        if seeds is not None and not (
            isinstance(seeds, list) and all(isinstance(s, int) for s in seeds)
        ):
            raise malformed("batch_reset: seeds must be an array of integers")
        result = self.data_server.batch_reset(str(data["task_id"]), count, seeds)
        self._send_envelope("batch_reset_result", result)

    def _async_step(self) -> None:
        data = check_record(
            self._read_data("async_step"),
            required={"replica_id", "action"},
            optional={"thought"},
            where="async_step",
        )
        thought = data.get("thought")
        if thought is not None and not isinstance(thought, str):
            raise malformed("async_step: thought must be a string")
        result = self.data_server.async_step(
            str(data["replica_id"]), data["action"], thought
        )
        self._send_envelope("ticket", result)

    def _next_batch(self) -> None:
        data = check_record(
            self._read_data("next_batch"),
            required=set(),
            optional={"max_items", "timeout_ms"},
            where="next_batch",
        )
        items = self.data_server.next_batch(
            max_items=int(data.get("max_items", 64)),
            timeout_ms=float(data.get("timeout_ms", 1000.0)),
        )
        self._send_envelope("batch", {"items": items})

    def _poll(self) -> None:
        data = check_record(
            self._read_data("poll"), required={"ticket"}, optional=set(), where="poll"
        )
        self._send_envelope("poll_result", self.data_server.poll(str(data["ticket"])))

    def _replicas(self) -> None:
        self._send_envelope("replica_list", {"replicas": self.data_server.list_replicas()})

    def _metrics(self) -> None:
        self._send_envelope("metrics", self.data_server.metrics())

    def _tasks(self) -> None:
        self._send_envelope(
            "task_list", {"task_ids": sorted(self.data_server.tasks.keys())}
        )

    def _task(self, task_id: str) -> None:
        task = self.data_server.tasks.get(task_id)
        if task is None:
            raise ProtocolError(ErrorCode.UNKNOWN_TASK, f"unknown task {task_id!r}")
        self._send_envelope("task", task.to_wire())

    def _trajectory(self, episode_id: str) -> None:
        self._send_envelope("trajectory", self.data_server.get_trajectory(episode_id))

    def _query(self) -> None:
        params = parse_qs(urlparse(self.path).query)

        def one(name: str) -> str | None:
            values = params.get(name)
            return values[0] if values else None

        min_reward = one("min_reward")
        since_ms = one("since_ms")
        limit = one("limit")
        rows = self.data_server.query_trajectories(
            task_id=one("task_id"),
            domain=one("domain"),
            status=one("status"),
            min_reward=float(min_reward) if min_reward is not None else None,
            since_ms=int(since_ms) if since_ms is not None else None,
            limit=int(limit) if limit is not None else None,
        )
        self._send_envelope("query_result", {"episodes": rows})

    def _blob(self, ref: str) -> None:
        data = self.data_server.store.get_blob(ref)
        self._send_bytes(200, data, "image/png")


def serve_manager(
    manager: ReplicaManager, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    """Expose one manager over HTTP; returns the bound (unstarted) server."""
    handler = type("BoundManagerHandler", (ManagerHandler,), {"manager": manager})
    httpd = ThreadingHTTPServer((host, port), handler)
    httpd.daemon_threads = True
    return httpd


def serve_data_server(
    data_server: DataServer, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    """Expose a data server over HTTP; returns the bound (unstarted) server."""
    handler = type(
        "BoundDataServerHandler", (DataServerHandler,), {"data_server": data_server}
    )
    httpd = ThreadingHTTPServer((host, port), handler)
    httpd.daemon_threads = True
    return httpd


def start_in_thread(httpd: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    return thread


# ---------------------------------------------------------------------------
# Clients


class _HttpBase:
    def __init__(self, base_url: str, timeout_s: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def _request(
        self,
        method: str,
        path: str,
        expected_type: str,
        payload: tuple[str, Mapping[str, Any]] | None = None,
        timeout_s: float | None = None,
    ) -> dict[str, Any]:
        url = self.base_url + path
        body = encode_message(*payload) if payload is not None else None
        try:
            response = self._session.request(
                method,
                url,
                data=body,
                headers={"Content-Type": "application/json"} if body else None,
                timeout=timeout_s or self.timeout_s,
            )
        except requests.RequestException as exc:
            raise ProtocolError(
                ErrorCode.REPLICA_CRASHED, f"{url} unreachable: {exc}"
            ) from exc
        msg_type, data = decode_message(response.content)
        if msg_type == "error":
            raise ProtocolError.from_wire(data)
        if msg_type != expected_type:
            raise malformed(f"expected {expected_type!r} reply, got {msg_type!r}")
        return data

    def close(self) -> None:
        self._session.close()


class HttpManagerClient(_HttpBase, ManagerClient):
    """Talks to one manager process over HTTP."""

    def __init__(self, base_url: str, replica_id: str, timeout_s: float = 30.0):
        _HttpBase.__init__(self, base_url, timeout_s)
        self.replica_id = replica_id

    def configure(self, task: TaskSpec) -> HealthReport:
        data = self._request("POST", "/configure", "health", ("configure", task.to_wire()))
        return HealthReport.from_wire(data)

    def reset(self, seed: int | None = None) -> tuple[Observation, dict[str, Any]]:
        payload: dict[str, Any] = {} if seed is None else {"seed": seed}
        data = self._request("POST", "/reset", "reset_result", ("reset", payload))
        rec = check_record(
            data, required={"observation", "info"}, optional=set(), where="reset_result"
        )
        return Observation.from_wire(rec["observation"]), dict(rec["info"])

    def step(self, action: Action) -> StepResult:
        data = self._request(
            "POST", "/step", "step_result", ("step", {"action": action.to_wire()})
        )
        return StepResult.from_wire(data)

    def evaluate_now(self) -> tuple[float, bool]:
        data = self._request("POST", "/evaluate", "evaluate_result", ("evaluate", {}))
        rec = check_record(
            data, required={"score", "success"}, optional=set(), where="evaluate_result"
        )
        return float(rec["score"]), bool(rec["success"])

    def health(self) -> HealthReport:
        data = self._request("GET", "/health", "health", timeout_s=5.0)
        return HealthReport.from_wire(data)


class DataServerClient(_HttpBase):
    """Talks to a data server over HTTP; used by the CLI and tests."""

    def register(self, replica_id: str, base_url: str) -> dict[str, Any]:
        return self._request(
            "POST",
            "/register",
            "registered",
            ("register", {"replica_id": replica_id, "base_url": base_url}),
        )

    def unregister(self, replica_id: str) -> dict[str, Any]:
        return self._request(
            "POST", "/unregister", "registered", ("unregister", {"replica_id": replica_id})
        )

    def replicas(self) -> list[dict[str, Any]]:
        return self._request("GET", "/replicas", "replica_list")["replicas"]

    def batch_reset(
        self, task_id: str, count: int, seeds: list[int] | None = None
    ) -> dict[str, Any]:
        payload: dict[str, Any] = {"task_id": task_id, "count": count}
        if seeds is not None:
            payload["seeds"] = seeds
        return self._request(
            "POST", "/batch_reset", "batch_reset_result", ("batch_reset", payload)
        )

    def async_step(
        self,
        replica_id: str,
        action: Mapping[str, Any] | Action,
        thought: str | None = None,
    ) -> dict[str, Any]:
        if isinstance(action, Action):
            action = action.to_wire()
        payload: dict[str, Any] = {"replica_id": replica_id, "action": dict(action)}
        if thought is not None:
            payload["thought"] = thought
        return self._request("POST", "/async_step", "ticket", ("async_step", payload))

    def next_batch(
        self, max_items: int = 64, timeout_ms: float = 1000.0
    ) -> list[dict[str, Any]]:
        data = self._request(
            "POST",
            "/next_batch",
            "batch",
            ("next_batch", {"max_items": max_items, "timeout_ms": timeout_ms}),
            timeout_s=self.timeout_s + timeout_ms / 1000.0,
        )
        return data["items"]

    def poll(self, ticket: str) -> dict[str, Any]:
        return self._request("POST", "/poll", "poll_result", ("poll", {"ticket": ticket}))

    def metrics(self) -> dict[str, Any]:
        return self._request("GET", "/metrics", "metrics")

    def task_ids(self) -> list[str]:
        return self._request("GET", "/tasks", "task_list")["task_ids"]

    def task(self, task_id: str) -> TaskSpec:
        return TaskSpec.from_wire(self._request("GET", f"/tasks/{task_id}", "task"))

    def trajectory(self, episode_id: str) -> dict[str, Any]:
        return self._request("GET", f"/trajectories/{episode_id}", "trajectory")

    def query(self, **filters: Any) -> list[dict[str, Any]]:
        query = "&".join(f"{k}={v}" for k, v in filters.items() if v is not None)
        path = "/query" + (f"?{query}" if query else "")
        return self._request("GET", path, "query_result")["episodes"]

    def blob(self, ref: str) -> bytes:
        url = f"{self.base_url}/blobs/{ref}"
        try:
            response = self._session.get(url, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise ProtocolError(
                ErrorCode.REPLICA_CRASHED, f"{url} unreachable: {exc}"
            ) from exc
        if response.status_code != 200:
            msg_type, data = decode_message(response.content)
            if msg_type == "error":
                raise ProtocolError.from_wire(data)
            raise malformed(f"blob fetch failed with HTTP {response.status_code}")
        return response.content
