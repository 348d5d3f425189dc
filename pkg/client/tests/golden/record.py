"""Record golden request/response transcripts from a live engine.

Run from the repo root with the engine installed:

    python3 client/tests/golden/record.py

Launches a 2-replica fleet on the stock tasks, performs a fixed scripted
exchange built from raw canonical JSON (deliberately without the SDK, so
the transcripts stay an independent oracle), and rewrites
``transcripts.json``.  Volatile fields (ids, wall-clock times) are listed
per step; everything else is compared byte-for-byte by the conformance
suite.
"""

from __future__ import annotations

import base64
import hashlib
import json
import shutil
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import requests

HERE = Path(__file__).resolve().parent
REPO_ROOT = HERE.parents[2]
SEEDS = [11, 12]


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def resolve(value, env: dict[str, str]):
    """Replace "{name}" placeholder strings with captured values."""
    if isinstance(value, str) and value.startswith("{") and value.endswith("}"):
        return env[value[1:-1]]
    if isinstance(value, dict):
        return {k: resolve(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [resolve(v, env) for v in value]
    return value


def dig(data, path: str):
    cur = data
    for part in path.split("."):
        cur = cur[int(part)] if isinstance(cur, list) else cur[part]
    return cur


# The scripted exchange.  "capture" pulls values out of the live response
# so later requests can reference them as "{name}" placeholders.
STEPS = [
    {
        "name": "list_tasks",
        "request": {"method": "GET", "path": "/tasks"},
    },
    {
        "name": "get_task",
        "request": {"method": "GET", "path": "/tasks/office-fill-header-row"},
    },
    {
        "name": "batch_reset",
        "request": {
            "method": "POST",
            "path": "/batch_reset",
            "type": "batch_reset",
            "data": {"task_id": "office-fill-header-row", "count": 2, "seeds": SEEDS},
        },
        "volatile": ["items.*.episode_id", "items.*.reset_latency_ms"],
        "capture": {"episode_id": "items.0.episode_id", "ref": "items.0.observation_ref"},
    },
    {
        "name": "async_step",
        "request": {
            "method": "POST",
            "path": "/async_step",
            "type": "async_step",
            "data": {
                "replica_id": "mgr-local-0",
                "action": {
                    "kind": "api_call",
                    "payload": {"name": "set_cell", "args": {"row": 0, "col": 0, "value": 7}},
                },
                "thought": "conformance",
            },
        },
        "volatile": ["ticket"],
        "capture": {"ticket": "ticket"},
    },
    {
        "name": "next_batch",
        "request": {
            "method": "POST",
            "path": "/next_batch",
            "type": "next_batch",
            "data": {"max_items": 8, "timeout_ms": 5000},
        },
        "volatile": [
            "items.*.ticket",
            "items.*.episode_id",
            "items.*.info.latency_ms",
        ],
    },
    {
        "name": "poll",
        "request": {
            "method": "POST",
            "path": "/poll",
            "type": "poll",
            "data": {"ticket": "{ticket}"},
        },
        "volatile": [
            "ticket",
            "outcome.ticket",
            "outcome.episode_id",
            "outcome.info.latency_ms",
        ],
    },
    {
        "name": "trajectory",
        "request": {"method": "GET", "path": "/trajectories/{episode_id}"},
        "volatile": [
            "episode_id",
            "started_at_ms",
            "turns.*.timestamp_ms",
            "turns.*.latency_ms",
        ],
    },
    {
        "name": "blob",
        "request": {"method": "GET", "path": "/blobs/{ref}"},
    },
    {
        "name": "unknown_replica",
        "request": {
            "method": "POST",
            "path": "/async_step",
            "type": "async_step",
            "data": {"replica_id": "mgr-ghost", "action": {"kind": "noop", "payload": {}}},
        },
    },
    {
        "name": "unknown_task",
        "request": {
            "method": "POST",
            "path": "/batch_reset",
            "type": "batch_reset",
            "data": {"task_id": "no-such-task", "count": 1},
        },
    },
    {
        "name": "unknown_ticket",
        "request": {
            "method": "POST",
            "path": "/poll",
            "type": "poll",
            "data": {"ticket": "t-ffffffff-99999999"},
        },
    },
    {
        "name": "malformed",
        "request": {
            "method": "POST",
            "path": "/poll",
            "raw_body_b64": base64.b64encode(b"{nope").decode("ascii"),
        },
    },
    {
        "name": "empty_drain",
        "request": {
            "method": "POST",
            "path": "/next_batch",
            "type": "next_batch",
            "data": {"max_items": 4, "timeout_ms": 10},
        },
    },
    {
        "name": "replicas",
        "request": {"method": "GET", "path": "/replicas"},
        "volatile": ["replicas.*.episode_id"],
    },
    {
        "name": "metrics",
        "request": {"method": "GET", "path": "/metrics"},
        "compare": "keys_only",
    },
]


def main() -> int:
    engine = shutil.which("gridfleet")
    if engine is None:
        print("gridfleet CLI not found", file=sys.stderr)
        return 1
    workdir = Path(tempfile.mkdtemp(prefix="golden-"))
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    proc = subprocess.Popen(
        [engine, "server", "--tasks", str(REPO_ROOT / "tasks"), "--store",
         str(workdir / "store"), "--host", "127.0.0.1", "--port", str(port),
         "--local-replicas", "2"],
        stdout=(workdir / "server.log").open("w"),
        stderr=subprocess.STDOUT,
    )
    base = f"http://127.0.0.1:{port}"
    try:
        deadline = time.monotonic() + 20
        while True:
            try:
                requests.get(f"{base}/tasks", timeout=1)
                break
            except requests.RequestException:
                if time.monotonic() > deadline:
                    raise RuntimeError("engine did not come up")
                time.sleep(0.1)

        env: dict[str, str] = {}
        out_steps = []
        session = requests.Session()
        for step in STEPS:
            req = step["request"]
            path = req["path"].format(**env) if "{" in req["path"] else req["path"]
            if req["method"] == "GET":
                resp = session.get(f"{base}{path}", timeout=30)
            elif "raw_body_b64" in req:
                resp = session.post(
                    f"{base}{path}", data=base64.b64decode(req["raw_body_b64"]), timeout=30
                )
            else:
                body = canonical(
                    {"v": 1, "type": req["type"], "data": resolve(req["data"], env)}
                ).encode()
                resp = session.post(f"{base}{path}", data=body, timeout=30)

            rec: dict = {
                "name": step["name"],
                "request": req,
                "status": resp.status_code,
            }
            if step["name"] == "blob":
                rec["response_sha256"] = hashlib.sha256(resp.content).hexdigest()
                rec["response_b64"] = base64.b64encode(resp.content).decode("ascii")
            else:
                envelope = resp.json()
                rec["response_type"] = envelope["type"]
                rec["response_data"] = envelope["data"]
                for key, p in step.get("capture", {}).items():
                    env[key] = dig(envelope["data"], p)
            if "volatile" in step:
                rec["volatile"] = step["volatile"]
            if "capture" in step:
                rec["capture"] = step["capture"]
            if "compare" in step:
                rec["compare"] = step["compare"]
            out_steps.append(rec)

        doc = {
            "meta": {
                "replicas": 2,
                "tasks": "stock engine task set",
                "seeds": SEEDS,
                "recorded_by": "record.py; rerun it after a deliberate protocol change",
            },
            "steps": out_steps,
        }
        (HERE / "transcripts.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        print(f"wrote {HERE / 'transcripts.json'} with {len(out_steps)} steps")
        return 0
    finally:
        proc.terminate()
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()


if __name__ == "__main__":
    raise SystemExit(main())
