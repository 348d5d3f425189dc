"""Environment backends.

The fleet treats an environment as a small lifecycle interface
(:class:`EnvironmentBackend`): create, reset, apply, snapshot, destroy,
plus a liveness probe.  The bundled :class:`GridSimBackend` is a
deterministic stand-in for a remote desktop VM: a grid of byte-valued
cells rendered to a PNG screenshot, with a configurable step latency
model and seeded fault injection so failure handling can be tested
without real infrastructure.
"""

from __future__ import annotations

import abc
import hashlib
import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .png import encode_png
from .protocol import Action, Observation, check_record, malformed

logger = logging.getLogger(__name__)

MAX_PIXELS = 1 << 20  # keeps any encoded frame well under the message cap


class BackendCrashed(Exception):
    """The backend died (injected fault, external kill, or destroy)."""


def hash_uniform(seed: int, n: int) -> float:
    """Deterministic stateless uniform in [0, 1): draw ``n`` under ``seed``.

    Stateless so a backend's RNG position restores from just
    ``{"seed", "n"}`` in O(1), which keeps snapshots tiny and replay
    exact.
    """
    digest = hashlib.sha256(struct.pack(">qq", seed, n)).digest()
    return int.from_bytes(digest[:8], "big") / float(1 << 64)


@dataclass(frozen=True)
class LatencyModel:
    """Per-apply wall-clock cost: ``base_ms`` plus uniform jitter."""

    base_ms: float = 50.0
    jitter_ms: float = 0.0

    def sample_ms(self, seed: int, n: int) -> float:
        if self.jitter_ms <= 0:
            return self.base_ms
        return self.base_ms + self.jitter_ms * hash_uniform(seed, n)


@dataclass
class SimConfig:
    """Static configuration of one grid sim instance."""

    rows: int = 16
    cols: int = 16
    screen_width: int = 192
    screen_height: int = 192
    latency: LatencyModel = field(default_factory=LatencyModel)
    crash_per_step: float = 0.0
    initial_cells: list[tuple[int, int, int]] = field(default_factory=list)
    initial_cursor: tuple[int, int] = (0, 0)
    shuffle_on_reset: bool = False

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must be at least 1x1")
        if self.screen_width < self.cols or self.screen_height < self.rows:
            raise ValueError("screen geometry smaller than one pixel per cell")
        if self.screen_width * self.screen_height > MAX_PIXELS:
            raise ValueError(f"screen geometry above {MAX_PIXELS} pixels")
        if not 0.0 <= self.crash_per_step <= 1.0:
            raise ValueError("crash_per_step must be a probability")
        if self.latency.base_ms < 0 or self.latency.jitter_ms < 0:
            raise ValueError("latency must be non-negative")
        r, c = self.initial_cursor
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise ValueError("initial cursor outside the grid")
        for rr, cc, vv in self.initial_cells:
            if not (0 <= rr < self.rows and 0 <= cc < self.cols):
                raise ValueError(f"initial cell ({rr}, {cc}) outside the grid")
            if not 0 <= vv <= 255:
                raise ValueError("cell values are bytes (0..255)")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimConfig":
        rec = check_record(
            data,
            required=set(),
            optional={
                "rows",
                "cols",
                "screen_width",
                "screen_height",
                "latency_base_ms",
                "latency_jitter_ms",
                "crash_per_step",
                "initial_cells",
                "initial_cursor",
                "shuffle_on_reset",
            },
            where="sim config",
        )
        try:
            return cls(
                rows=int(rec.get("rows", 16)),
                cols=int(rec.get("cols", 16)),
                screen_width=int(rec.get("screen_width", 192)),
                screen_height=int(rec.get("screen_height", 192)),
                latency=LatencyModel(
                    base_ms=float(rec.get("latency_base_ms", 50.0)),
                    jitter_ms=float(rec.get("latency_jitter_ms", 0.0)),
                ),
                crash_per_step=float(rec.get("crash_per_step", 0.0)),
                initial_cells=[
                    (int(r), int(c), int(v)) for r, c, v in rec.get("initial_cells", [])
                ],
                initial_cursor=tuple(int(v) for v in rec.get("initial_cursor", (0, 0))),
                shuffle_on_reset=bool(rec.get("shuffle_on_reset", False)),
            )
        except (TypeError, ValueError) as exc:
            raise malformed(f"sim config: {exc}") from None


class EnvironmentBackend(abc.ABC):
    """Lifecycle interface every backend implements."""

    @abc.abstractmethod
    def create(self) -> None:
        """Bring the environment up.  Idempotent after destroy."""

    @abc.abstractmethod
    def destroy(self) -> None:
        """Tear the environment down, aborting any in-flight apply."""

    @abc.abstractmethod
    def reset(self, seed: int) -> Observation:
        """Start a fresh episode and return the first observation."""

    @abc.abstractmethod
    def apply(self, action: Action) -> Observation:
        """Apply one action and return the resulting observation."""

    @abc.abstractmethod
    def snapshot_state(self) -> dict[str, Any]:
        """JSON-able full state, sufficient to judge task success."""

    @abc.abstractmethod
    def is_alive(self) -> bool:
        """Cheap liveness probe; safe to call from any thread."""


# Fixed 256-entry palette: value 0 is black, the rest spread over RGB by
# coprime multipliers so adjacent values are visually distinct.
_v = np.arange(256, dtype=np.uint16)
PALETTE = np.stack([(_v * 37) % 256, (_v * 73) % 256, (_v * 151) % 256], axis=1).astype(
    np.uint8
)
del _v

BACKGROUND_RGB = (16, 16, 16)

# Cursor movement deltas for arrow keys.
_ARROWS = {"Up": (-1, 0), "Down": (1, 0), "Left": (0, -1), "Right": (0, 1)}


class GridSimBackend(EnvironmentBackend):
    """Deterministic grid desktop.

    State is a ``rows x cols`` grid of byte values plus a cursor, a
    typed-character buffer, a clipboard string, and a vertical viewport
    offset.  Rendering, input handling, and fault draws are all pure
    functions of (config, seed, action history), so the same seed and
    action sequence always yields byte-identical observations.

    Cross-thread contract: ``reset``/``apply``/``snapshot_state`` are
    called by one thread at a time (the owner serializes); ``destroy``,
    ``crash_now`` and ``is_alive`` may race with an in-flight apply and
    abort it.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        self._lock = threading.Lock()
        self._abort = threading.Event()
        self._alive = False
        self._generation = 0
        self._hang_next_s: float | None = None
        self._force_crash_next = False
        self.created = False
        self._cells: np.ndarray | None = None
        self._seed = 0
        self._draws = 0
        self._turn = 0
        self._cursor = list(config.initial_cursor)
        self._typed = ""
        self._clipboard = ""
        self._viewport_row = 0

    # -- lifecycle ----------------------------------------------------

    def create(self) -> None:
        with self._lock:
            self._abort = threading.Event()
            self._alive = True
            self._generation += 1
            self.created = True
        self._init_state(seed=0)

    def destroy(self) -> None:
        with self._lock:
            self._alive = False
            self.created = False
            self._abort.set()

    def crash_now(self) -> None:
        """External kill switch: dies immediately, aborting in-flight work."""
        with self._lock:
            self._alive = False
            self._abort.set()

    def is_alive(self) -> bool:
        return self._alive

    # -- fault injection hooks (used by tests and the chaos harness) --

    def hang_next_apply(self, duration_s: float) -> None:
        """Make the next apply stall, exercising the watchdog timeout path."""
        self._hang_next_s = duration_s

    def crash_next_apply(self) -> None:
        self._force_crash_next = True

    # -- state --------------------------------------------------------

    def _init_state(self, seed: int) -> None:
        cfg = self.config
        cells = np.zeros((cfg.rows, cfg.cols), dtype=np.uint8)
        for r, c, v in cfg.initial_cells:
            cells[r, c] = v
        self._seed = seed
        self._draws = 0
        if cfg.shuffle_on_reset and seed != 0:
            # seed-keyed Fisher-Yates over flattened cells
            flat = cells.reshape(-1)
            for i in range(flat.size - 1, 0, -1):
                j = int(hash_uniform(seed, self._draws) * (i + 1))
                self._draws += 1
                flat[i], flat[j] = flat[j], flat[i]
        self._cells = cells
        self._turn = 0
        self._cursor = list(cfg.initial_cursor)
        self._typed = ""
        self._clipboard = ""
        self._viewport_row = 0

    def snapshot_state(self) -> dict[str, Any]:
        assert self._cells is not None
        return {
            "rows": self.config.rows,
            "cols": self.config.cols,
            "cells": self._cells.tolist(),
            "cursor": list(self._cursor),
            "typed_buffer": self._typed,
            "clipboard": self._clipboard,
            "viewport_row": self._viewport_row,
            "turn": self._turn,
            "rng": {"seed": self._seed, "n": self._draws},
        }

    # -- observation --------------------------------------------------

    def _render(self) -> bytes:
        cfg = self.config
        assert self._cells is not None
        ch = cfg.screen_height // cfg.rows
        cw = cfg.screen_width // cfg.cols
        visible = (
            np.roll(self._cells, -self._viewport_row, axis=0)
            if self._viewport_row
            else self._cells
        )
        rgb = PALETTE[visible]
        img = np.repeat(np.repeat(rgb, ch, axis=0), cw, axis=1)
        frame = np.empty((cfg.screen_height, cfg.screen_width, 3), dtype=np.uint8)
        frame[:] = BACKGROUND_RGB
        frame[: cfg.rows * ch, : cfg.cols * cw] = img
        disp_r = (self._cursor[0] - self._viewport_row) % cfg.rows
        r0, c0 = disp_r * ch, self._cursor[1] * cw
        frame[r0 : r0 + ch, c0 : c0 + cw] = 255 - frame[r0 : r0 + ch, c0 : c0 + cw]
        return encode_png(frame)

    def _observe(self) -> Observation:
        return Observation(
            screenshot=self._render(),
            # logical clock: the turn number, so equal states give equal bytes
            captured_at=self._turn,
            metadata={"backend": "grid_sim", "state": self.snapshot_state()},
        )

    # -- episode ------------------------------------------------------

    def reset(self, seed: int) -> Observation:
        self._check_alive()
        self._init_state(seed=seed)
        return self._observe()

    def apply(self, action: Action) -> Observation:
        self._check_alive()
        gen = self._generation
        self._wait_latency()
        if self._force_crash_next:
            self._force_crash_next = False
            self.crash_now()
        if self.config.crash_per_step > 0:
            u = hash_uniform(self._seed, self._draws)
            self._draws += 1
            if u < self.config.crash_per_step:
                self.crash_now()
        with self._lock:
            if not self._alive or self._generation != gen:
                raise BackendCrashed("backend died during apply")
        self._dispatch(action)
        self._turn += 1
        return self._observe()

    def _check_alive(self) -> None:
        if not self._alive or self._cells is None:
            raise BackendCrashed("backend is not running")

    def _wait_latency(self) -> None:
        if self._hang_next_s is not None:
            delay_s = self._hang_next_s
            self._hang_next_s = None
        else:
            delay_s = (
                self.config.latency.sample_ms(self._seed, self._turn) / 1000.0
            )
        if delay_s > 0 and self._abort.wait(delay_s):
            raise BackendCrashed("backend died during apply")

    # -- input handling ----------------------------------------------

    def _dispatch(self, action: Action) -> None:
        kind = action.kind
        if kind == "key_press":
            self._key(action.payload["key"])
        elif kind == "type_text":
            self._type(action.payload["text"])
        elif kind == "mouse_move":
            self._point(action.payload["x"], action.payload["y"])
        elif kind == "mouse_click":
            self._click(
                action.payload["x"], action.payload["y"], action.payload["button"]
            )
        elif kind == "scroll":
            self._viewport_row = (
                self._viewport_row + int(action.payload["dy"])
            ) % self.config.rows
        elif kind == "api_call":
            self._api(action.payload["name"], dict(action.payload.get("args", {})))
        # noop and terminate change nothing; the turn still advances

    def _key(self, key: str) -> None:
        r, c = self._cursor
        rows, cols = self.config.rows, self.config.cols
        if key in _ARROWS:
            dr, dc = _ARROWS[key]
            self._cursor = [min(max(r + dr, 0), rows - 1), min(max(c + dc, 0), cols - 1)]
        elif key == "Home":
            self._cursor[1] = 0
        elif key == "End":
            self._cursor[1] = cols - 1
        elif key == "Enter":
            self._typed += "\n"
            self._cursor = [min(r + 1, rows - 1), 0]
        elif key == "Backspace":
            self._typed = self._typed[:-1]
        elif key == "Delete":
            self._cells[r, c] = 0
        elif key == "Tab":
            self._cursor[1] = min(c + 4, cols - 1)
        # Escape and unrecognized keys are accepted no-ops

    def _type(self, text: str) -> None:
        self._typed += text
        r, c = self._cursor
        for ch in text:
            if c >= self.config.cols:
                break
            self._cells[r, c] = ord(ch) % 256
            c += 1
        self._cursor = [r, min(c, self.config.cols - 1)]

    def _cell_at(self, x: int, y: int) -> tuple[int, int]:
        cfg = self.config
        disp_r = min(y * cfg.rows // cfg.screen_height, cfg.rows - 1)
        col = min(x * cfg.cols // cfg.screen_width, cfg.cols - 1)
        return (disp_r + self._viewport_row) % cfg.rows, col

    def _point(self, x: int, y: int) -> None:
        r, c = self._cell_at(x, y)
        self._cursor = [r, c]

    def _click(self, x: int, y: int, button: str) -> None:
        self._point(x, y)
        r, c = self._cursor
        if button == "right":
            self._clipboard = str(int(self._cells[r, c]))
        elif button == "middle":
            self._write_string(self._clipboard)

    def _write_string(self, text: str) -> None:
        r, c = self._cursor
        for ch in text:
            if c >= self.config.cols:
                break
            self._cells[r, c] = ord(ch) % 256
            c += 1
        self._cursor = [r, min(c, self.config.cols - 1)]

    def _api(self, name: str, args: dict[str, Any]) -> None:
        rows, cols = self.config.rows, self.config.cols
        try:
            if name == "set_cell":
                r, c, v = int(args["row"]), int(args["col"]), int(args["value"])
                if 0 <= r < rows and 0 <= c < cols:
                    self._cells[r, c] = v % 256
            elif name == "fill_row":
                r, v = int(args["row"]), int(args["value"])
                if 0 <= r < rows:
                    self._cells[r, :] = v % 256
            elif name == "copy":
                r = int(args.get("row", self._cursor[0]))
                c = int(args.get("col", self._cursor[1]))
                if 0 <= r < rows and 0 <= c < cols:
                    self._clipboard = str(int(self._cells[r, c]))
            elif name == "paste":
                self._write_string(self._clipboard)
            elif name == "clear":
                self._cells[:] = 0
                self._typed = ""
            else:
                # unknown names are accepted no-ops so task files can
                # target newer backends without breaking older ones
                logger.debug("api_call %r not in registry; ignored", name)
        except (KeyError, TypeError, ValueError):
            logger.debug("api_call %r with bad args %r; ignored", name, args)
