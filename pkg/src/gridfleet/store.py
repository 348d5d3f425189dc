"""Durable trajectory store.

Layout under one root directory::

    episodes/<episode_id>.jsonl   one canonical-JSON event per line
    blobs/<sha256>.png            content-addressed observation frames

Episode files carry three event shapes: one ``open`` line, zero or
more ``turn`` lines (index, observation ref, thought, action, reward,
latency, timestamp), and at most one ``close`` line (status, final
reward, final observation ref).  Observation frames are stored once
per distinct byte content and referenced by SHA-256, so repeated
frames cost nothing extra.

Writes are crash-safe by construction: blob files land via a temp file
plus atomic rename, and event lines are appended and flushed one at a
time, so a reader never sees a half-written blob and at worst one
truncated trailing line, which readers skip.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping

from .protocol import EpisodeStatus, canonical_dumps, malformed

logger = logging.getLogger(__name__)

_EPISODE_SUFFIX = ".jsonl"
_BLOB_SUFFIX = ".png"


@dataclass(frozen=True)
class TurnRecord:
    index: int
    observation_ref: str
    action: dict[str, Any]
    reward: float
    latency_ms: float
    timestamp_ms: int
    thought: str | None = None


@dataclass
class EpisodeRecord:
    """One episode as read back from the store."""

    episode_id: str
    task_id: str
    replica_id: str
    domain: str
    episode_seed: int
    started_at_ms: int
    first_observation_ref: str
    turns: list[TurnRecord] = field(default_factory=list)
    status: EpisodeStatus | None = None
    final_reward: float | None = None
    final_observation_ref: str | None = None
    ended_at_ms: int | None = None
    truncated_tail: bool = False

    @property
    def closed(self) -> bool:
        return self.status is not None


class EpisodeWriter:
    """Append-only writer for a single episode file."""

    def __init__(self, store: "TrajectoryStore", episode_id: str, path: Path):
        self.episode_id = episode_id
        self._store = store
        self._path = path
        self._fh = open(path, "x", encoding="utf-8")
        self._lock = threading.Lock()
        self._turns = 0
        self._closed = False

    def _write(self, event: Mapping[str, Any]) -> None:
        line = canonical_dumps(event)
        with self._lock:
            if self._closed:
                raise RuntimeError(f"episode {self.episode_id} is already closed")
            self._fh.write(line + "\n")
            self._fh.flush()

    def write_open(
        self,
        *,
        task_id: str,
        replica_id: str,
        domain: str,
        episode_seed: int,
        started_at_ms: int,
        first_observation_ref: str,
    ) -> None:
        self._write(
            {
                "event": "open",
                "episode_id": self.episode_id,
                "task_id": task_id,
                "replica_id": replica_id,
                "domain": domain,
                "episode_seed": episode_seed,
                "started_at_ms": started_at_ms,
                "first_observation_ref": first_observation_ref,
            }
        )

    def append_turn(
        self,
        *,
        index: int,
        observation_ref: str,
        action: Mapping[str, Any],
        reward: float,
        latency_ms: float,
        timestamp_ms: int,
        thought: str | None = None,
    ) -> None:
        event: dict[str, Any] = {
            "event": "turn",
            "index": index,
            "observation_ref": observation_ref,
            "action": dict(action),
            "reward": reward,
            "latency_ms": latency_ms,
            "timestamp_ms": timestamp_ms,
        }
        if thought is not None:
            event["thought"] = thought
        self._write(event)
        self._turns += 1

    def close(
        self,
        *,
        status: EpisodeStatus,
        final_reward: float,
        final_observation_ref: str | None,
        ended_at_ms: int,
    ) -> None:
        self._write(
            {
                "event": "close",
                "status": status.value,
                "final_reward": final_reward,
                "final_observation_ref": final_observation_ref,
                "ended_at_ms": ended_at_ms,
                "turns": self._turns,
            }
        )
        with self._lock:
            self._closed = True
            self._fh.close()

    def abandon(self) -> None:
        """Close the file handle without a close event (process shutdown)."""
        with self._lock:
            if not self._closed:
                self._closed = True
                self._fh.close()


class TrajectoryStore:
    """Filesystem-backed episode and blob storage."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.episodes_dir = self.root / "episodes"
        self.blobs_dir = self.root / "blobs"
        self.episodes_dir.mkdir(parents=True, exist_ok=True)
        self.blobs_dir.mkdir(parents=True, exist_ok=True)
        self._blob_lock = threading.Lock()
        self._known_blobs: set[str] = set()

    # -- blobs --------------------------------------------------------

    def put_blob(self, data: bytes) -> str:
        """Store bytes, returning their SHA-256 hex ref.  Idempotent."""
        ref = hashlib.sha256(data).hexdigest()
        with self._blob_lock:
            if ref in self._known_blobs:
                return ref
        path = self.blobs_dir / (ref + _BLOB_SUFFIX)
        if not path.exists():
            tmp = path.with_name(f".{ref}.{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        with self._blob_lock:
            self._known_blobs.add(ref)
        return ref

    def has_blob(self, ref: str) -> bool:
        return (self.blobs_dir / (ref + _BLOB_SUFFIX)).exists()

    def get_blob(self, ref: str) -> bytes:
        path = self.blobs_dir / (ref + _BLOB_SUFFIX)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise malformed(f"unknown blob ref {ref!r}") from None

    def blob_count(self) -> int:
        return sum(1 for _ in self.blobs_dir.glob("*" + _BLOB_SUFFIX))

    # -- episodes -----------------------------------------------------

    def create_episode(self, episode_id: str) -> EpisodeWriter:
        path = self.episodes_dir / (episode_id + _EPISODE_SUFFIX)
        return EpisodeWriter(self, episode_id, path)

    def episode_ids(self) -> list[str]:
        return sorted(
            p.name[: -len(_EPISODE_SUFFIX)]
            for p in self.episodes_dir.glob("*" + _EPISODE_SUFFIX)
        )

    def _iter_events(self, path: Path) -> Iterator[tuple[dict | None, bool]]:
        """Yields (event, ok) per line; ok=False marks an unparsable line."""
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                stripped = line.strip()
                if not stripped:
                    continue
                try:
                    yield json.loads(stripped), True
                except ValueError:
                    yield None, False

    def read_episode(self, episode_id: str) -> EpisodeRecord:
        path = self.episodes_dir / (episode_id + _EPISODE_SUFFIX)
        if not path.exists():
            raise malformed(f"unknown episode {episode_id!r}")
        record: EpisodeRecord | None = None
        for event, ok in self._iter_events(path):
            if not ok:
                # torn tail from a crashed writer; everything before it stands
                if record is not None:
                    record.truncated_tail = True
                break
            kind = event.get("event")
            if kind == "open":
                record = EpisodeRecord(
                    episode_id=event["episode_id"],
                    task_id=event["task_id"],
                    replica_id=event["replica_id"],
                    domain=event.get("domain", "office"),
                    episode_seed=event["episode_seed"],
                    started_at_ms=event["started_at_ms"],
                    first_observation_ref=event["first_observation_ref"],
                )
            elif kind == "turn":
                if record is None:
                    raise malformed(f"{episode_id}: turn event before open")
                record.turns.append(
                    TurnRecord(
                        index=event["index"],
                        observation_ref=event["observation_ref"],
                        action=event["action"],
                        reward=event["reward"],
                        latency_ms=event["latency_ms"],
                        timestamp_ms=event["timestamp_ms"],
                        thought=event.get("thought"),
                    )
                )
            elif kind == "close":
                if record is None:
                    raise malformed(f"{episode_id}: close event before open")
                try:
                    record.status = EpisodeStatus(event["status"])
                except ValueError:
                    raise malformed(
                        f"{episode_id}: unknown status {event['status']!r}"
                    ) from None
                record.final_reward = event["final_reward"]
                record.final_observation_ref = event.get("final_observation_ref")
                record.ended_at_ms = event["ended_at_ms"]
            else:
                raise malformed(f"{episode_id}: unknown event kind {kind!r}")
        if record is None:
            raise malformed(f"{episode_id}: no open event")
        return record

    def query(
        self,
        *,
        task_id: str | None = None,
        domain: str | None = None,
        status: EpisodeStatus | str | None = None,
        min_reward: float | None = None,
        since_ms: int | None = None,
        limit: int | None = None,
    ) -> list[EpisodeRecord]:
        """Filter episodes; result order is (started_at_ms, episode_id)."""
        want_status = EpisodeStatus(status) if isinstance(status, str) else status
        out: list[EpisodeRecord] = []
        for episode_id in self.episode_ids():
            rec = self.read_episode(episode_id)
            if task_id is not None and rec.task_id != task_id:
                continue
            if domain is not None and rec.domain != domain:
                continue
            if want_status is not None and rec.status is not want_status:
                continue
            if min_reward is not None and (
                rec.final_reward is None or rec.final_reward < min_reward
            ):
                continue
            if since_ms is not None and rec.started_at_ms < since_ms:
                continue
            out.append(rec)
        out.sort(key=lambda r: (r.started_at_ms, r.episode_id))
        if limit is not None:
            out = out[:limit]
        return out

    # -- integrity ----------------------------------------------------

    def integrity_report(self, verify_hashes: bool = False) -> dict[str, Any]:
        """Whole-store scan: structure, ref resolution, optional re-hash.

        Returns counts plus a list of human-readable problems; an empty
        problem list means the store is internally consistent.
        """
        problems: list[str] = []
        episodes = 0
        turns = 0
        refs: dict[str, str] = {}  # ref -> first episode that cited it
        for episode_id in self.episode_ids():
            episodes += 1
            try:
                rec = self.read_episode(episode_id)
            except Exception as exc:
                problems.append(f"{episode_id}: unreadable ({exc})")
                continue
            if rec.truncated_tail:
                problems.append(f"{episode_id}: truncated trailing line")
            refs.setdefault(rec.first_observation_ref, episode_id)
            for i, turn in enumerate(rec.turns):
                turns += 1
                if turn.index != i:
                    problems.append(
                        f"{episode_id}: turn index {turn.index} at position {i}"
                    )
                refs.setdefault(turn.observation_ref, episode_id)
            if rec.final_observation_ref:
                refs.setdefault(rec.final_observation_ref, episode_id)
        for ref in sorted(refs):
            path = self.blobs_dir / (ref + _BLOB_SUFFIX)
            if not path.exists():
                problems.append(f"missing blob {ref} (referenced by {refs[ref]})")
            elif verify_hashes:
                actual = hashlib.sha256(path.read_bytes()).hexdigest()
                if actual != ref:
                    problems.append(f"blob {ref} content hashes to {actual}")
        return {
            "episodes": episodes,
            "turns": turns,
            "distinct_refs": len(refs),
            "blobs_on_disk": self.blob_count(),
            "problems": problems,
        }
