"""Task definitions and the success-evaluator algebra.

A task bundles a natural-language prompt, the environment configuration
its episodes run under, a step limit, and an evaluator: a small tree of
predicates scored against the environment's state snapshot.  Evaluator
trees are plain JSON-able dicts so they travel on the wire and live in
TOML files unchanged.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .protocol import ErrorCode, ProtocolError, check_record, malformed

logger = logging.getLogger(__name__)

MAX_EVALUATOR_DEPTH = 8
WEIGHT_SUM_TOL = 1e-9
ALL_PRODUCT_TOL = 1e-12

# score at or above this counts as task success
SUCCESS_THRESHOLD = 1.0 - 1e-9

DOMAINS = ("office", "daily", "professional", "workflow")

EVALUATOR_KINDS = (
    "cell_equals",
    "buffer_equals",
    "cursor_at",
    "predicate_all",
    "predicate_any",
    "weighted_sum",
    "native",
)

# escape hatch: arbitrary scoring callables, keyed by name
_NATIVE_EVALUATORS: dict[str, Callable[[Mapping[str, Any]], float]] = {}


def register_native_evaluator(
    name: str, fn: Callable[[Mapping[str, Any]], float]
) -> None:
    """Register a callable usable from ``{"kind": "native", "name": ...}``."""
    _NATIVE_EVALUATORS[name] = fn


def evaluator_failure(message: str) -> ProtocolError:
    return ProtocolError(ErrorCode.EVALUATOR_FAILURE, message)


def validate_evaluator(
    node: Mapping[str, Any],
    rows: int | None = None,
    cols: int | None = None,
    depth: int = 0,
) -> None:
    """Structural validation of an evaluator tree.

    Raises ``MALFORMED_MESSAGE`` on shape errors.  Grid bounds are only
    checked when the caller knows the grid dimensions.
    """
    if depth > MAX_EVALUATOR_DEPTH:
        raise malformed(f"evaluator nesting deeper than {MAX_EVALUATOR_DEPTH}")
    if not isinstance(node, Mapping) or "kind" not in node:
        raise malformed("evaluator node must be an object with a 'kind'")
    kind = node["kind"]
    if kind not in EVALUATOR_KINDS:
        raise malformed(f"unknown evaluator kind {kind!r}")
    where = f"evaluator {kind}"

    if kind == "cell_equals":
        rec = check_record(node, {"kind", "row", "col", "value"}, set(), where)
        _check_cell(rec["row"], rec["col"], rows, cols, where)
        if not isinstance(rec["value"], int) or not 0 <= rec["value"] <= 255:
            raise malformed(f"{where}: value must be a byte (0..255)")
    elif kind == "buffer_equals":
        rec = check_record(node, {"kind", "value"}, set(), where)
        if not isinstance(rec["value"], str):
            raise malformed(f"{where}: value must be a string")
    elif kind == "cursor_at":
        rec = check_record(node, {"kind", "row", "col"}, set(), where)
        _check_cell(rec["row"], rec["col"], rows, cols, where)
    elif kind in ("predicate_all", "predicate_any"):
        rec = check_record(node, {"kind", "children"}, set(), where)
        children = rec["children"]
        if not isinstance(children, list) or not children:
            raise malformed(f"{where}: children must be a non-empty array")
        for child in children:
            validate_evaluator(child, rows, cols, depth + 1)
    elif kind == "weighted_sum":
        rec = check_record(node, {"kind", "children", "weights"}, set(), where)
        children, weights = rec["children"], rec["weights"]
        if not isinstance(children, list) or not children:
            raise malformed(f"{where}: children must be a non-empty array")
        if not isinstance(weights, list) or len(weights) != len(children):
            raise malformed(f"{where}: weights must match children one to one")
        total = 0.0
        for w in weights:
            if isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0:
                raise malformed(f"{where}: weights must be non-negative numbers")
            total += float(w)
        if not math.isclose(total, 1.0, rel_tol=0.0, abs_tol=WEIGHT_SUM_TOL):
            raise malformed(f"{where}: weights sum to {total!r}, expected 1.0")
        for child in children:
            validate_evaluator(child, rows, cols, depth + 1)
    elif kind == "native":
        rec = check_record(node, {"kind", "name"}, set(), where)
        if not isinstance(rec["name"], str) or not rec["name"]:
            raise malformed(f"{where}: name must be a non-empty string")


def _check_cell(row: Any, col: Any, rows: int | None, cols: int | None, where: str) -> None:
    for label, v in (("row", row), ("col", col)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise malformed(f"{where}: {label} must be a non-negative integer")
    if rows is not None and row >= rows:
        raise malformed(f"{where}: row {row} outside grid of {rows} rows")
    if cols is not None and col >= cols:
        raise malformed(f"{where}: col {col} outside grid of {cols} cols")


def evaluate(node: Mapping[str, Any], state: Mapping[str, Any], depth: int = 0) -> float:
    """Score a state snapshot against an evaluator tree.

    Returns a float in [0, 1].  Raises ``EVALUATOR_FAILURE`` on
    excessive nesting, a missing native function, or a native function
    that errors or returns an out-of-range score.
    """
    if depth > MAX_EVALUATOR_DEPTH:
        raise evaluator_failure(f"evaluator nesting deeper than {MAX_EVALUATOR_DEPTH}")
    kind = node["kind"]
    if kind == "cell_equals":
        cell = state["cells"][node["row"]][node["col"]]
        return 1.0 if cell == node["value"] else 0.0
    if kind == "buffer_equals":
        return 1.0 if state["typed_buffer"] == node["value"] else 0.0
    if kind == "cursor_at":
        return 1.0 if list(state["cursor"]) == [node["row"], node["col"]] else 0.0
    if kind == "predicate_all":
        product = 1.0
        for child in node["children"]:
            product *= evaluate(child, state, depth + 1)
            if product == 0.0:
                break
        # strict AND: partial products do not earn partial credit
        return 1.0 if product >= 1.0 - ALL_PRODUCT_TOL else 0.0
    if kind == "predicate_any":
        return max(evaluate(child, state, depth + 1) for child in node["children"])
    if kind == "weighted_sum":
        return float(
            sum(
                w * evaluate(child, state, depth + 1)
                for w, child in zip(node["weights"], node["children"])
            )
        )
    if kind == "native":
        name = node["name"]
        fn = _NATIVE_EVALUATORS.get(name)
        if fn is None:
            raise evaluator_failure(f"native evaluator {name!r} is not registered")
        try:
            score = float(fn(state))
        except Exception as exc:
            raise evaluator_failure(f"native evaluator {name!r} raised: {exc}") from exc
        if not 0.0 <= score <= 1.0 or math.isnan(score):
            raise evaluator_failure(
                f"native evaluator {name!r} returned {score!r}, expected [0, 1]"
            )
        return score
    raise evaluator_failure(f"unknown evaluator kind {kind!r}")


def is_success(score: float) -> bool:
    return score >= SUCCESS_THRESHOLD


@dataclass(frozen=True)
class TaskSpec:
    """One unit of work an episode can be run against."""

    task_id: str
    prompt: str
    evaluator: dict[str, Any]
    domain: str = "office"
    env: dict[str, Any] = field(default_factory=dict)
    step_limit: int = 25
    early_stop: bool = False

    def __post_init__(self) -> None:
        if not self.task_id:
            raise malformed("task_id must be non-empty")
        if self.domain not in DOMAINS:
            raise malformed(f"domain must be one of {list(DOMAINS)}, got {self.domain!r}")
        if self.step_limit < 1:
            raise malformed("step_limit must be at least 1")
        rows = self.env.get("rows", 16)
        cols = self.env.get("cols", 16)
        validate_evaluator(self.evaluator, rows=rows, cols=cols)

    def to_wire(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "prompt": self.prompt,
            "evaluator": self.evaluator,
            "domain": self.domain,
            "env": self.env,
            "step_limit": self.step_limit,
            "early_stop": self.early_stop,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "TaskSpec":
        rec = check_record(
            data,
            required={"task_id", "prompt", "evaluator"},
            optional={"domain", "env", "step_limit", "early_stop"},
            where="task",
        )
        if not isinstance(rec["prompt"], str):
            raise malformed("task: prompt must be a string")
        env = rec.get("env", {})
        if not isinstance(env, Mapping):
            raise malformed("task: env must be an object")
        return cls(
            task_id=str(rec["task_id"]),
            prompt=rec["prompt"],
            evaluator=dict(rec["evaluator"]),
            domain=rec.get("domain", "office"),
            env=dict(env),
            step_limit=int(rec.get("step_limit", 25)),
            early_stop=bool(rec.get("early_stop", False)),
        )


def load_task_file(path: str | Path) -> TaskSpec:
    """Load a single task from a TOML file."""
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise malformed(f"{p}: invalid TOML: {exc}") from None
    try:
        return TaskSpec.from_wire(data)
    except ProtocolError as exc:
        # name the offending file; a directory scan hits many
        raise malformed(f"{p}: {exc.message}") from None


def load_task_dir(path: str | Path) -> dict[str, TaskSpec]:
    """Load every ``*.toml`` under a directory tree, keyed by task_id."""
    root = Path(path)
    tasks: dict[str, TaskSpec] = {}
    for file in sorted(root.rglob("*.toml")):
        task = load_task_file(file)
        if task.task_id in tasks:
            raise malformed(f"{file}: duplicate task_id {task.task_id!r}")
        tasks[task.task_id] = task
    if not tasks:
        raise malformed(f"no task files found under {root}")
    return tasks
