"""Trajectory sampling for the model-update side of the pipeline.

The update loop is user code; the SDK's job ends at handing over a
uniformly sampled batch of trajectory rows.  The hook points are:

1. ``batch = sample_batch(handle, ...)`` pulls rows from the store.
2. ``numericals = your_calculation(batch)`` computes whatever the
   algorithm needs (values, advantages, returns).
3. ``your_update(model, batch, numericals)`` consumes them.

Stages 2 and 3 are deliberately not implemented here; the engine stays
algorithm-agnostic.  ``noop_calculation`` and ``noop_update`` below are
shaped placeholders the quickstart wires in.
"""

from __future__ import annotations

import random
from typing import Any

from .dataloader import DataloaderHandle
from .wire import ValidationError


def sample_batch(
    handle: DataloaderHandle,
    filter: dict[str, Any] | None = None,
    batch_size: int | None = None,
    *,
    seed: int | None = None,
) -> list[dict[str, Any]]:
    """Uniform without-replacement sample of trajectory rows.

    ``filter`` takes the store query keys (task_id, domain, status,
    min_reward, since_ms, limit).  A ``batch_size`` larger than the
    matching set returns everything; the same seed over the same store
    contents returns the same rows in the same order.
    """
    size = handle.batch_size if batch_size is None else batch_size
    if size < 0:
        raise ValidationError("batch_size must be non-negative")
    rows = handle.query(**(filter or {}))
    if size == 0:
        return []
    if size >= len(rows):
        return rows
    return random.Random(seed).sample(rows, size)


def noop_calculation(batch: list[dict[str, Any]]) -> dict[str, Any]:
    """Placeholder for the per-batch numericals stage; returns counts only."""
    return {"rows": len(batch)}


def noop_update(model: Any, batch: list[dict[str, Any]], numericals: dict[str, Any]) -> Any:
    """Placeholder for the model update stage; returns the model unchanged."""
    return model
