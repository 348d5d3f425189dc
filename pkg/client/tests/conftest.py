"""Fixtures that launch a real engine over its CLI.

The SDK is exercised only through the engine's external surface: the
``gridfleet`` console script and its HTTP endpoints.  Every test module
gets its own fleet with a fresh store, so abandoned episodes from one
module can never starve another.
"""

from __future__ import annotations

import shutil
import socket
import subprocess
import time
from pathlib import Path

import pytest
import requests

REPO_ROOT = Path(__file__).resolve().parents[2]
ENGINE_TASKS = REPO_ROOT / "tasks"

# fixed-length episodes for rate checks: 10 turns at exactly 50 ms each
STEADY_RATE_TASK = """\
task_id = "workflow-steady-rate"
prompt = "Keep stepping; every episode runs the full step budget."
domain = "workflow"
step_limit = 10
early_stop = false

[env]
rows = 8
cols = 8
screen_width = 64
screen_height = 64
latency_base_ms = 50.0
latency_jitter_ms = 0.0

[evaluator]
kind = "cell_equals"
row = 0
col = 0
value = 1
"""


def engine_binary() -> str:
    path = shutil.which("gridfleet")
    if path is None:
        pytest.fail("the gridfleet engine CLI is not installed; install the engine package first")
    return path


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def launch_engine(
    workdir: Path, tasks_dir: Path, replicas: int
) -> tuple[subprocess.Popen, str]:
    port = free_port()
    log = (workdir / "server.log").open("w")
    proc = subprocess.Popen(
        [
            engine_binary(),
            "server",
            "--tasks", str(tasks_dir),
            "--store", str(workdir / "store"),
            "--host", "127.0.0.1",
            "--port", str(port),
            "--local-replicas", str(replicas),
        ],
        stdout=log,
        stderr=subprocess.STDOUT,
    )
    base = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + 20.0
    while True:
        if proc.poll() is not None:
            raise RuntimeError(
                f"engine exited during startup: {(workdir / 'server.log').read_text()[-2000:]}"
            )
        try:
            requests.get(f"{base}/tasks", timeout=1.0)
            return proc, base
        except requests.RequestException:
            if time.monotonic() > deadline:
                proc.kill()
                raise RuntimeError("engine did not come up within 20s")
            time.sleep(0.1)


def stop_engine(proc: subprocess.Popen) -> None:
    proc.terminate()
    try:
        proc.wait(timeout=10)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait(timeout=5)


def build_task_dir(workdir: Path) -> Path:
    tasks = workdir / "tasks"
    tasks.mkdir()
    for f in ENGINE_TASKS.rglob("*.toml"):
        shutil.copy(f, tasks / f.name)
    (tasks / "steady-rate.toml").write_text(STEADY_RATE_TASK)
    return tasks


@pytest.fixture(scope="module")
def engine(tmp_path_factory: pytest.TempPathFactory):
    """A 16-replica sim fleet on the stock tasks plus the steady-rate one."""
    workdir = tmp_path_factory.mktemp("engine")
    proc, base = launch_engine(workdir, build_task_dir(workdir), replicas=16)
    yield base
    stop_engine(proc)
