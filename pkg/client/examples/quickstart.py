"""End-to-end tour: launch a sim fleet, roll out episodes, sample batches.

Starts a local 16-replica engine as a subprocess (the ``gridfleet``
console script must be on PATH), drives the reference rollout loop with
a scripted policy until 16 episodes close, then runs a few iterations of
the update-side loop: sample a batch of closed trajectories, hand it to
the (placeholder) calculation and update stages.

    python3 examples/quickstart.py [--tasks DIR] [--episodes N]
"""

from __future__ import annotations

import argparse
import shutil
import socket
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import requests

from gridfleet_client import (
    DataloaderHandle,
    ScriptedPolicy,
    noop_calculation,
    noop_update,
    rollout,
    sample_batch,
    solved_header_row_script,
)

DEFAULT_TASKS = Path(__file__).resolve().parents[2] / "tasks"


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def launch_fleet(tasks: Path, store: Path, replicas: int) -> tuple[subprocess.Popen, str]:
    binary = shutil.which("gridfleet")
    if binary is None:
        sys.exit("the gridfleet engine is not installed (pip install -e '..[dev]')")
    port = free_port()
    proc = subprocess.Popen(
        [
            binary, "server",
            "--tasks", str(tasks),
            "--store", str(store),
            "--host", "127.0.0.1",
            "--port", str(port),
            "--local-replicas", str(replicas),
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    base = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + 20.0
    while True:
        if proc.poll() is not None:
            sys.exit("engine exited during startup")
        try:
            requests.get(f"{base}/tasks", timeout=1.0)
            return proc, base
        except requests.RequestException:
            if time.monotonic() > deadline:
                proc.kill()
                sys.exit("engine did not come up within 20s")
            time.sleep(0.1)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tasks", type=Path, default=DEFAULT_TASKS)
    ap.add_argument("--episodes", type=int, default=16)
    ap.add_argument("--replicas", type=int, default=16)
    args = ap.parse_args()

    store = Path(tempfile.mkdtemp(prefix="gridfleet-quickstart-"))
    proc, base = launch_fleet(args.tasks, store / "store", args.replicas)
    print(f"fleet up at {base} ({args.replicas} replicas)")
    handle = DataloaderHandle(base, batch_size=args.replicas)
    try:
        # -- rollout side: generate trajectories ----------------------
        policy = ScriptedPolicy(
            {"office-fill-header-row": solved_header_row_script()}
        )
        summary = rollout(
            handle,
            policy,
            episodes=args.episodes,
            tasks=["office-fill-header-row"],
            max_wall_s=300,
        )
        print(
            f"rollout: {summary['episodes_closed']} closed "
            f"({summary['episodes_complete']} complete, "
            f"{summary['episodes_truncated']} truncated, "
            f"{summary['episodes_aborted']} aborted), "
            f"mean score {summary['mean_final_score']:.2f}, "
            f"{summary['trajectories_per_min']:.0f} traj/min"
        )

        # -- update side: consume them --------------------------------
        model = {"step": 0}
        for it in range(3):
            batch = sample_batch(
                handle, {"status": "COMPLETE"}, batch_size=8, seed=it
            )
            numericals = noop_calculation(batch)
            model = noop_update(model, batch, numericals)
            rewards = [row["final_reward"] for row in batch]
            print(
                f"update {it}: sampled {numericals['rows']} trajectories, "
                f"mean reward {sum(rewards) / len(rewards):.2f}"
            )
    finally:
        handle.close()
        proc.terminate()
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
        shutil.rmtree(store, ignore_errors=True)
    print("done")


if __name__ == "__main__":
    main()
