"""Command-line entry points.

One executable, five families of subcommands::

    gridfleet manager ...      run one replica manager as an HTTP service
    gridfleet server ...       run the data server (optionally with an
                               embedded local replica fleet)
    gridfleet tasks validate   check task files without running anything
    gridfleet planner ...      capacity, cost, and contention math
    gridfleet bench ...        throughput / latency / recovery / chaos /
                               datagen experiments

Long-running services log one JSON object per line to stdout so fleet
logs aggregate cleanly; pass ``--plain-logs`` for human-format logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import bench, planner
from .manager import LocalManagerClient, ReplicaManager
from .protocol import ProtocolError
from .server import DataServer
from .store import TrajectoryStore
from .tasks import load_task_dir, load_task_file
from .wire import DataServerClient, serve_data_server, serve_manager

logger = logging.getLogger(__name__)


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        event = {
            "ts": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            event["exception"] = self.formatException(record.exc_info)
        return json.dumps(event, sort_keys=True)


def _setup_logging(json_logs: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stdout)
    if json_logs:
        handler.setFormatter(JsonLogFormatter())
    else:
        handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(Path(path), "rb") as fh:
        return tomllib.load(fh)


def _opt(args: argparse.Namespace, config: dict[str, Any], key: str, default: Any) -> Any:
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(key, default)


def _load_tasks(path: str) -> dict[str, Any]:
    p = Path(path)
    if p.is_dir():
        return load_task_dir(p)
    task = load_task_file(p)
    return {task.task_id: task}


# ---------------------------------------------------------------------------
# Services


def _cmd_manager(args: argparse.Namespace) -> int:
    config = _load_config(args.config).get("manager", _load_config(args.config))
    replica_id = _opt(args, config, "replica_id", None)
    if not replica_id:
        print("manager: --replica-id is required (or set it in the config file)", file=sys.stderr)
        return 2
    host = _opt(args, config, "host", "127.0.0.1")
    port = int(_opt(args, config, "port", 0))
    provision = config.get("recovery_provision_ms", [0.0, 0.0])
    manager = ReplicaManager(
        replica_id,
        watchdog_interval_ms=float(_opt(args, config, "watchdog_interval_ms", 100.0)),
        step_timeout_ms=float(_opt(args, config, "step_timeout_ms", 10_000.0)),
        recovery_provision_ms=(float(provision[0]), float(provision[1])),
    )
    if args.task:
        task = load_task_file(args.task)
        manager.configure(task)
        logger.info("preconfigured task %s", task.task_id)
    httpd = serve_manager(manager, host, port)
    bound_host, bound_port = httpd.server_address[:2]
    advertise = _opt(args, config, "advertise_url", f"http://{bound_host}:{bound_port}")
    logger.info("manager %s listening on %s:%d", replica_id, bound_host, bound_port)
    register_url = _opt(args, config, "register_url", None)
    if register_url:
        DataServerClient(register_url).register(replica_id, advertise)
        logger.info("registered with %s as %s", register_url, advertise)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.shutdown()
        manager.close()
    return 0


def _cmd_server(args: argparse.Namespace) -> int:
    config = _load_config(args.config).get("server", _load_config(args.config))
    tasks = _load_tasks(_opt(args, config, "tasks", "tasks"))
    store = TrajectoryStore(_opt(args, config, "store", "store"))
    server = DataServer(
        store,
        tasks,
        max_workers=int(_opt(args, config, "max_workers", 1024)),
        poll_interval_ms=float(_opt(args, config, "poll_interval_ms", 200.0)),
        metrics_window_s=float(_opt(args, config, "metrics_window_s", 60.0)),
    )
    managers: list[ReplicaManager] = []
    local_n = int(_opt(args, config, "local_replicas", 0))
    for i in range(local_n):
        manager = ReplicaManager(
            f"mgr-local-{i}",
            watchdog_interval_ms=float(_opt(args, config, "watchdog_interval_ms", 100.0)),
            step_timeout_ms=float(_opt(args, config, "step_timeout_ms", 10_000.0)),
        )
        managers.append(manager)
        server.register(LocalManagerClient(manager))
    if local_n:
        logger.info("embedded fleet of %d local replicas ready", local_n)
    host = _opt(args, config, "host", "127.0.0.1")
    port = int(_opt(args, config, "port", 8700))
    httpd = serve_data_server(server, host, port)
    bound_host, bound_port = httpd.server_address[:2]
    logger.info(
        "data server listening on %s:%d (%d tasks, store at %s)",
        bound_host,
        bound_port,
        len(tasks),
        store.root,
    )
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.shutdown()
        server.close()
        for manager in managers:
            manager.close()
    return 0


# ---------------------------------------------------------------------------
# Offline commands


def _cmd_tasks_validate(args: argparse.Namespace) -> int:
    try:
        tasks = _load_tasks(args.path)
    except (ProtocolError, OSError, ValueError) as exc:
        print(f"INVALID: {exc}", file=sys.stderr)
        return 1
    for task_id in sorted(tasks):
        task = tasks[task_id]
        print(
            f"ok {task_id} domain={task.domain} step_limit={task.step_limit} "
            f"early_stop={task.early_stop}"
        )
    print(f"{len(tasks)} task(s) valid")
    return 0


def _resolve_profile(args: argparse.Namespace) -> tuple[planner.ReplicaProfile, float]:
    if args.profile:
        return planner.load_profile(args.profile)
    return planner.ReplicaProfile(), planner.DEFAULT_CPU_OVERSUBSCRIPTION


def _cmd_planner_plan(args: argparse.Namespace) -> int:
    catalog = planner.load_catalog(args.catalog)
    profile, oversub = _resolve_profile(args)
    result = planner.plan(catalog, args.replicas, profile, oversub)
    print(
        json.dumps(
            {
                "machine": result.machine.name,
                "machines_needed": result.machines_needed,
                "capacity_per_machine": result.capacity_per_machine,
                "binding": result.binding,
                "exact_fit": result.exact_fit,
                "total_price_per_day": result.total_price_per_day,
                "cost_per_replica_per_day": result.cost_per_replica,
            },
            indent=2,
        )
    )
    return 0


def _cmd_planner_contention(args: argparse.Namespace) -> int:
    profile, _ = _resolve_profile(args)
    ks = [int(k) for k in args.sweep.split(",")] if args.sweep else [args.replicas_per_machine]
    rows = planner.contention_sweep(
        ks, profile, args.budget, trials=args.trials, seed=args.seed
    )
    print(json.dumps({"budget_cores_per_replica": args.budget, "points": rows}, indent=2))
    return 0


def _cmd_planner_estimate(args: argparse.Namespace) -> int:
    out = planner.datagen_estimate(
        args.replicas, args.turns, args.latency_ms, args.price_per_day
    )
    print(json.dumps(out, indent=2))
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    t0 = time.monotonic()
    if args.experiment == "throughput":
        summary = bench.run_throughput_sweep(
            ns=tuple(int(n) for n in args.ns.split(",")),
            latency_ms=args.latency_ms,
            duration_s=args.duration_s,
            repetitions=args.repetitions,
            out_dir=args.out,
        )
    elif args.experiment == "latency":
        summary = bench.run_latency_sweep(
            ns=tuple(int(n) for n in args.ns.split(",")),
            latency_ms=args.latency_ms,
            duration_s=args.duration_s,
            repetitions=args.repetitions,
            out_dir=args.out,
        )
    elif args.experiment == "recovery":
        summary = bench.run_recovery_experiment(
            n_replicas=args.replicas, out_dir=args.out
        )
        summary = {k: v for k, v in summary.items() if k != "curve"}
    elif args.experiment == "chaos":
        summary = bench.run_chaos(
            n_replicas=args.replicas,
            total_steps=args.steps,
            crash_per_step=args.crash_per_step,
            out_dir=args.out,
        )
    elif args.experiment == "datagen":
        summary = bench.run_datagen(
            n_replicas=args.replicas,
            turns_per_episode=args.turns,
            latency_ms=args.latency_ms,
            duration_s=args.duration_s,
            out_dir=args.out,
        )
    else:  # unreachable via argparse choices
        return 2
    summary["wall_time_s"] = round(time.monotonic() - t0, 2)
    print(json.dumps(summary, indent=2, default=str))
    return 0


# ---------------------------------------------------------------------------
# Argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridfleet",
        description="Distributed data engine for agent-environment rollouts.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument(
        "--plain-logs",
        action="store_true",
        help="human-format logs instead of JSON lines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manager", help="run one replica manager over HTTP")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--replica-id", dest="replica_id")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--task", help="task file to preconfigure")
    p.add_argument("--watchdog-interval-ms", dest="watchdog_interval_ms", type=float)
    p.add_argument("--step-timeout-ms", dest="step_timeout_ms", type=float)
    p.add_argument("--register-url", dest="register_url")
    p.add_argument("--advertise-url", dest="advertise_url")
    p.set_defaults(fn=_cmd_manager, service=True)

    p = sub.add_parser("server", help="run the data server over HTTP")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--tasks", help="task file or directory")
    p.add_argument("--store", help="trajectory store root")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--max-workers", dest="max_workers", type=int)
    p.add_argument("--poll-interval-ms", dest="poll_interval_ms", type=float)
    p.add_argument("--metrics-window-s", dest="metrics_window_s", type=float)
    p.add_argument(
        "--local-replicas",
        dest="local_replicas",
        type=int,
        help="embed this many in-process sim replicas",
    )
    p.add_argument("--watchdog-interval-ms", dest="watchdog_interval_ms", type=float)
    p.add_argument("--step-timeout-ms", dest="step_timeout_ms", type=float)
    p.set_defaults(fn=_cmd_server, service=True)

    p_tasks = sub.add_parser("tasks", help="task file utilities")
    tasks_sub = p_tasks.add_subparsers(dest="tasks_command", required=True)
    p = tasks_sub.add_parser("validate", help="validate task files")
    p.add_argument("path", help="task file or directory")
    p.set_defaults(fn=_cmd_tasks_validate)

    p_planner = sub.add_parser("planner", help="capacity and cost planning")
    planner_sub = p_planner.add_subparsers(dest="planner_command", required=True)
    p = planner_sub.add_parser("plan", help="cheapest fleet for a replica count")
    p.add_argument("--catalog", required=True, help="machine catalog TOML")
    p.add_argument("--profile", help="replica profile TOML")
    p.add_argument("--replicas", type=int, required=True)
    p.set_defaults(fn=_cmd_planner_plan)
    p = planner_sub.add_parser("contention", help="burst-contention Monte Carlo")
    p.add_argument("--profile", help="replica profile TOML")
    p.add_argument("--replicas-per-machine", dest="replicas_per_machine", type=int, default=64)
    p.add_argument("--budget", type=float, default=1.1, help="cores per replica supplied")
    p.add_argument("--trials", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", help="comma-separated consolidation levels, e.g. 1,2,4,8")
    p.set_defaults(fn=_cmd_planner_contention)
    p = planner_sub.add_parser("estimate", help="closed-form generation throughput")
    p.add_argument("--replicas", type=int, required=True)
    p.add_argument("--turns", type=int, required=True)
    p.add_argument("--latency-ms", dest="latency_ms", type=float, required=True)
    p.add_argument("--price-per-day", dest="price_per_day", type=float)
    p.set_defaults(fn=_cmd_planner_estimate)

    p = sub.add_parser("bench", help="fleet experiments")
    p.add_argument(
        "experiment",
        choices=["throughput", "latency", "recovery", "chaos", "datagen"],
    )
    p.add_argument("--ns", default="8,16,32,64", help="fleet sizes, comma-separated")
    p.add_argument("--latency-ms", dest="latency_ms", type=float, default=50.0)
    p.add_argument("--duration-s", dest="duration_s", type=float, default=2.0)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--replicas", type=int, default=64)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--crash-per-step", dest="crash_per_step", type=float, default=0.01)
    p.add_argument("--turns", type=int, default=15)
    p.add_argument("--out", help="directory for CSV output")
    p.set_defaults(fn=_cmd_bench)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(
        json_logs=bool(getattr(args, "service", False)) and not args.plain_logs,
        verbose=args.verbose,
    )
    try:
        return args.fn(args)
    except ProtocolError as err:
        print(f"error [{err.code.value}]: {err.message}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
