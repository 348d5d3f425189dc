"""Hardware capacity and cost planning for replica fleets.

Sizes machine fleets for a target replica count, prices them per day,
and estimates CPU contention risk when replicas burst concurrently.
The model: a replica needs a fixed RAM reservation at all times, idles
at a small core draw, and bursts to a higher draw with some
probability at any instant.  RAM is reserved per replica; cores are
oversubscribed, betting that not everyone bursts at once.  The
contention simulator prices that bet.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger(__name__)

DEFAULT_CPU_OVERSUBSCRIPTION = 4.0

RAM_BOUND = "RAM_BOUND"
CPU_BOUND = "CPU_BOUND"


@dataclass(frozen=True)
class MachineType:
    """One rentable machine shape."""

    name: str
    cores: int
    ram_gb: float
    price_per_day: float

    def __post_init__(self) -> None:
        if self.cores < 1 or self.ram_gb <= 0 or self.price_per_day < 0:
            raise ValueError(f"implausible machine shape: {self}")


@dataclass(frozen=True)
class ReplicaProfile:
    """Resource appetite of one environment replica."""

    ram_gb: float = 6.0
    idle_cores: float = 0.2
    burst_cores: float = 2.0
    burst_prob: float = 0.3

    def __post_init__(self) -> None:
        if self.ram_gb <= 0 or self.idle_cores < 0 or self.burst_cores <= 0:
            raise ValueError(f"implausible replica profile: {self}")
        if self.burst_cores < self.idle_cores:
            raise ValueError("burst_cores below idle_cores")
        if not 0.0 <= self.burst_prob <= 1.0:
            raise ValueError("burst_prob must be a probability")


@dataclass(frozen=True)
class Capacity:
    count: int
    binding: str  # which resource ran out first
    ram_limit: int
    cpu_limit: int


def capacity(
    machine: MachineType,
    profile: ReplicaProfile,
    cpu_oversubscription: float = DEFAULT_CPU_OVERSUBSCRIPTION,
) -> Capacity:
    """Replicas one machine can host: min of the RAM and CPU ceilings.

    RAM is hard-reserved per replica.  The CPU ceiling assumes every
    replica could burst, discounted by the oversubscription factor.
    Ties report RAM_BOUND, the safer thing to fix first.
    """
    ram_limit = math.floor(machine.ram_gb / profile.ram_gb)
    cpu_limit = math.floor(machine.cores * cpu_oversubscription / profile.burst_cores)
    count = min(ram_limit, cpu_limit)
    binding = RAM_BOUND if ram_limit <= cpu_limit else CPU_BOUND
    return Capacity(count=count, binding=binding, ram_limit=ram_limit, cpu_limit=cpu_limit)


def cost_per_replica(price_per_day: float, replicas: int) -> float:
    """Daily price split across replicas, rounded to a tenth of a cent."""
    if replicas < 1:
        raise ValueError("replicas must be positive")
    return round(price_per_day / replicas, 3)


def partitions(n_replicas: int, per_machine: int) -> tuple[int, bool]:
    """Machines needed for ``n_replicas`` and whether the split is exact."""
    if n_replicas < 1 or per_machine < 1:
        raise ValueError("counts must be positive")
    k = math.ceil(n_replicas / per_machine)
    return k, n_replicas % per_machine == 0


@dataclass(frozen=True)
class Plan:
    machine: MachineType
    machines_needed: int
    capacity_per_machine: int
    n_replicas: int
    total_price_per_day: float
    cost_per_replica: float
    exact_fit: bool
    binding: str


def plan(
    catalog: Sequence[MachineType],
    n_replicas: int,
    profile: ReplicaProfile | None = None,
    cpu_oversubscription: float = DEFAULT_CPU_OVERSUBSCRIPTION,
) -> Plan:
    """Cheapest whole-machine fleet hosting ``n_replicas``.

    Ranks candidates by daily total, then by machine count, then by
    name, so the answer is deterministic for a given catalog.
    """
    if not catalog:
        raise ValueError("catalog is empty")
    if n_replicas < 1:
        raise ValueError("n_replicas must be positive")
    profile = profile or ReplicaProfile()
    best: tuple[int, int, str] | None = None
    best_plan: Plan | None = None
    for machine in catalog:
        cap = capacity(machine, profile, cpu_oversubscription)
        if cap.count < 1:
            logger.debug("%s cannot host even one replica; skipped", machine.name)
            continue
        k, exact = partitions(n_replicas, cap.count)
        total = round(machine.price_per_day * k, 2)
        key = (round(total * 100), k, machine.name)
        if best is None or key < best:
            best = key
            best_plan = Plan(
                machine=machine,
                machines_needed=k,
                capacity_per_machine=cap.count,
                n_replicas=n_replicas,
                total_price_per_day=total,
                cost_per_replica=cost_per_replica(total, n_replicas),
                exact_fit=exact,
                binding=cap.binding,
            )
    if best_plan is None:
        raise ValueError("no machine in the catalog can host a replica")
    return best_plan


# ---------------------------------------------------------------------------
# Contention risk


def simulate_contention(
    k_replicas: int,
    profile: ReplicaProfile,
    cores_per_replica_budget: float,
    trials: int = 1_000_000,
    seed: int = 0,
) -> float:
    """Monte Carlo probability that instantaneous demand exceeds supply.

    Each replica bursts independently with ``burst_prob``; a machine
    hosting ``k_replicas`` supplies ``k_replicas * cores_per_replica_budget``
    cores.  Larger machines pool burst risk, so the exceedance
    probability falls as ``k_replicas`` grows for any budget above the
    single-replica break-even point.
    """
    if k_replicas < 1 or trials < 1:
        raise ValueError("k_replicas and trials must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    bursting = rng.binomial(k_replicas, profile.burst_prob, size=trials)
    demand = bursting * profile.burst_cores + (k_replicas - bursting) * profile.idle_cores
    supply = k_replicas * cores_per_replica_budget
    return float(np.mean(demand > supply))


def contention_sweep(
    ks: Iterable[int],
    profile: ReplicaProfile,
    cores_per_replica_budget: float,
    trials: int = 1_000_000,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Exceedance probability per consolidation level; one seed per level."""
    return [
        (
            k,
            simulate_contention(
                k, profile, cores_per_replica_budget, trials=trials, seed=seed + k
            ),
        )
        for k in ks
    ]


# ---------------------------------------------------------------------------
# Generation-run estimates


def datagen_estimate(
    n_replicas: int,
    turns_per_episode: int,
    step_latency_ms: float,
    price_per_day: float | None = None,
) -> dict[str, float]:
    """Closed-form steady-state throughput for a saturated fleet.

    With every replica always mid-step, the fleet completes
    ``n_replicas / latency`` steps per second and an episode every
    ``turns * latency`` seconds per replica.
    """
    if n_replicas < 1 or turns_per_episode < 1 or step_latency_ms <= 0:
        raise ValueError("all inputs must be positive")
    latency_s = step_latency_ms / 1000.0
    steps_per_sec = n_replicas / latency_s
    trajectories_per_min = n_replicas * 60.0 / (turns_per_episode * latency_s)
    out = {
        "steps_per_sec": steps_per_sec,
        "trajectories_per_min": trajectories_per_min,
        "seconds_per_trajectory_per_replica": turns_per_episode * latency_s,
    }
    if price_per_day is not None:
        per_traj_day_fraction = (turns_per_episode * latency_s) / (86_400.0 * n_replicas)
        out["usd_per_thousand_trajectories"] = round(
            1000.0 * per_traj_day_fraction * price_per_day, 4
        )
    return out


# ---------------------------------------------------------------------------
# Config loading


def load_catalog(path: str | Path) -> list[MachineType]:
    """Read machine shapes from a TOML file with ``[[machine]]`` tables."""
    with open(Path(path), "rb") as fh:
        data = tomllib.load(fh)
    machines = data.get("machine", [])
    if not machines:
        raise ValueError(f"{path}: no [[machine]] tables")
    return [
        MachineType(
            name=str(m["name"]),
            cores=int(m["cores"]),
            ram_gb=float(m["ram_gb"]),
            price_per_day=float(m["price_per_day"]),
        )
        for m in machines
    ]


def load_profile(path: str | Path) -> tuple[ReplicaProfile, float]:
    """Read a replica profile plus oversubscription factor from TOML."""
    with open(Path(path), "rb") as fh:
        data = tomllib.load(fh)
    section = data.get("profile", data)
    profile = ReplicaProfile(
        ram_gb=float(section.get("ram_gb", 6.0)),
        idle_cores=float(section.get("idle_cores", 0.2)),
        burst_cores=float(section.get("burst_cores", 2.0)),
        burst_prob=float(section.get("burst_prob", 0.3)),
    )
    oversub = float(section.get("cpu_oversubscription", DEFAULT_CPU_OVERSUBSCRIPTION))
    return profile, oversub
