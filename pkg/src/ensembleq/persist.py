"""Broker durability: append-only operation log plus periodic snapshots.

Every state-changing operation appends one canonical-JSON line to
``log.jsonl`` and flushes it to the OS, so the state survives a killed
broker process. A snapshot collapses the log into ``snapshot.json``
(atomic rename) and truncates it; loading replays snapshot + log.
"""

from __future__ import annotations

import json
import os

from .envelope import canonical_json
from .errors import StorageError

LOG_FILENAME = "log.jsonl"
SNAPSHOT_FILENAME = "snapshot.json"


class OpLog:
    """One broker's on-disk operation log and snapshot pair."""

    def __init__(self, directory: str, *, fsync: bool = False):
        self.directory = directory
        self.fsync = fsync
        self.log_path = os.path.join(directory, LOG_FILENAME)
        self.snapshot_path = os.path.join(directory, SNAPSHOT_FILENAME)
        try:
            os.makedirs(directory, exist_ok=True)
            self._fh = open(self.log_path, "a", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open broker log in {directory}: {exc}") from exc

    def load(self) -> tuple[dict | None, list[dict]]:
        """Return (snapshot or None, events appended after it)."""
        snapshot = None
        try:
            if os.path.isfile(self.snapshot_path):
                with open(self.snapshot_path, "r", encoding="utf-8") as fh:
                    snapshot = json.load(fh)
            events: list[dict] = []
            if os.path.isfile(self.log_path):
                with open(self.log_path, "r", encoding="utf-8") as fh:
                    lines = [ln.strip() for ln in fh]
                for lineno, line in enumerate(lines, 1):
                    if not line:
                        continue
                    try:
                        events.append(json.loads(line))
                    except json.JSONDecodeError:
                        if lineno == len(lines):
                            break  # torn final write from a crash: drop the tail
                        raise StorageError(
                            f"corrupt log entry at {self.log_path}:{lineno}"
                        ) from None
            return snapshot, events
        except OSError as exc:
            raise StorageError(f"cannot read broker state: {exc}") from exc

    def append(self, event: dict) -> None:
        try:
            self._fh.write(canonical_json(event))
            self._fh.write("\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StorageError(f"cannot append to broker log: {exc}") from exc

    def rewrite_snapshot(self, state: dict) -> None:
        """Replace the snapshot with `state` and truncate the log."""
        tmp = self.snapshot_path + ".tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(canonical_json(state))
                fh.write("\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.snapshot_path)
            self._fh.close()
            self._fh = open(self.log_path, "w", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write broker snapshot: {exc}") from exc

    def close(self) -> None:
        try:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
        except (OSError, ValueError):
            pass
