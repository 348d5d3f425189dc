"""Distributed data engine for agent-environment rollouts.

The package splits into a thin wire protocol, per-replica state managers
with watchdog self-recovery, a batched asynchronous data server backed by
a content-addressed trajectory store, a deterministic grid simulator for
tests and benchmarks, and a capacity/cost planner.
"""

from .backends import EnvironmentBackend, GridSimBackend, LatencyModel, SimConfig
from .manager import LocalManagerClient, ManagerClient, ReplicaManager
from .planner import (
    MachineType,
    Plan,
    ReplicaProfile,
    capacity,
    cost_per_replica,
    datagen_estimate,
    plan,
    simulate_contention,
)
from .protocol import (
    Action,
    ErrorCode,
    EpisodeStatus,
    HealthReport,
    Observation,
    ProtocolError,
    ReplicaState,
    StepResult,
)
from .server import DataServer
from .store import EpisodeRecord, TrajectoryStore, TurnRecord
from .tasks import TaskSpec, load_task_dir, load_task_file, register_native_evaluator
from .wire import (
    DataServerClient,
    HttpManagerClient,
    serve_data_server,
    serve_manager,
    start_in_thread,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "DataServer",
    "DataServerClient",
    "EnvironmentBackend",
    "EpisodeRecord",
    "EpisodeStatus",
    "ErrorCode",
    "GridSimBackend",
    "HealthReport",
    "HttpManagerClient",
    "LatencyModel",
    "LocalManagerClient",
    "MachineType",
    "ManagerClient",
    "Observation",
    "Plan",
    "ProtocolError",
    "ReplicaManager",
    "ReplicaProfile",
    "ReplicaState",
    "SimConfig",
    "StepResult",
    "TaskSpec",
    "TrajectoryStore",
    "TurnRecord",
    "capacity",
    "cost_per_replica",
    "datagen_estimate",
    "load_task_dir",
    "load_task_file",
    "plan",
    "register_native_evaluator",
    "serve_data_server",
    "serve_manager",
    "simulate_contention",
    "start_in_thread",
    "__version__",
]
