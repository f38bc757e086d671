"""The broker core: a priority queue with at-least-once delivery and a
per-task status store, usable in-process or behind the TCP service.

All state lives behind one lock/condition pair, so concurrent clients
observe a total order of enqueue/consume/ack. Delivery is leased: an
envelope consumed but not acknowledged within the lease returns to the
ready queue (attempt count preserved), which is what lets a surviving
worker finish the work of a killed one.

Enqueue is idempotent on task_id: re-posting a task that is pending,
running, or already succeeded is a no-op. ``force=True`` (used by
resubmission) overrides the no-op for succeeded and dead tasks.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time

from .envelope import KIND_GENERATION, KIND_REAL, TaskEnvelope, canonical_json
from .errors import MessageTooLargeError, UnknownTagError
from .persist import OpLog

DEFAULT_MESSAGE_SIZE_LIMIT = 64 * 1024 * 1024
DEFAULT_LEASE_SECONDS = 600.0
DEFAULT_SNAPSHOT_EVERY = 1000

STATUS_PENDING = "pending"
STATUS_RUNNING = "running"
STATUS_SUCCEEDED = "succeeded"
STATUS_FAILED = "failed"
STATUS_DEAD = "dead"
STATUSES = (STATUS_PENDING, STATUS_RUNNING, STATUS_SUCCEEDED, STATUS_FAILED, STATUS_DEAD)

_COUNTER_KEYS = ("enqueued", "delivered", "acked", "failed", "dead", "requeued", "purged")


class TaskRecord:
    """Durable per-task status backing stats and resubmission."""

    __slots__ = (
        "task_id", "kind", "study_id", "node_id", "status", "attempt",
        "retries_remaining", "enqueued_ts", "started_ts", "finished_ts",
        "worker_id", "exit_code", "sample_width", "envelope", "queue_seq",
    )

    def __init__(self, envelope: dict, now: float, queue_seq: int):
        self.task_id = envelope["task_id"]
        self.kind = envelope["kind"]
        self.study_id = envelope["study_id"]
        self.node_id = envelope["node_id"]
        self.status = STATUS_PENDING
        self.attempt = 0
        self.retries_remaining = envelope["retries"]
        self.enqueued_ts = now
        self.started_ts: float | None = None
        self.finished_ts: float | None = None
        self.worker_id: str | None = None
        self.exit_code: int | None = None
        rng = envelope.get("range")
        if self.kind == KIND_GENERATION:
            self.sample_width = 0
        elif rng:
            self.sample_width = rng[1] - rng[0]
        else:
            self.sample_width = 1  # single sample, or a step_once execution
        self.envelope = envelope
        self.queue_seq = queue_seq

    @property
    def priority(self) -> int:
        return self.envelope["priority"]

    def to_dict(self, *, with_envelope: bool = False) -> dict:
        data = {
            "task_id": self.task_id,
            "kind": self.kind,
            "study_id": self.study_id,
            "node_id": self.node_id,
            "status": self.status,
            "attempt": self.attempt,
            "retries_remaining": self.retries_remaining,
            "enqueued_ts": self.enqueued_ts,
            "started_ts": self.started_ts,
            "finished_ts": self.finished_ts,
            "worker_id": self.worker_id,
            "exit_code": self.exit_code,
            "sample_width": self.sample_width,
        }
        if with_envelope:
            data["envelope"] = self.envelope
        return data


class Broker:
    """Single authoritative queue + results state, thread-safe."""

    def __init__(
        self,
        persist_dir: str | None = None,
        *,
        message_size_limit: int = DEFAULT_MESSAGE_SIZE_LIMIT,
        default_lease: float = DEFAULT_LEASE_SECONDS,
        snapshot_every: int = DEFAULT_SNAPSHOT_EVERY,
        fsync: bool = False,
    ):
        self.message_size_limit = message_size_limit
        self.default_lease = default_lease
        self.snapshot_every = snapshot_every
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._ready: list[tuple[int, int, str]] = []  # (-priority, seq, task_id)
        self._unacked: dict[int, tuple[str, str, float]] = {}  # tag -> (task_id, consumer, mono)
        self._records: dict[str, TaskRecord] = {}
        self._node_progress: dict[tuple[str, str], dict[str, int]] = {}
        self._study_roots: dict[str, str] = {}
        self._counters = dict.fromkeys(_COUNTER_KEYS, 0)
        self._seq = itertools.count(1)
        self._next_tag = 1
        self._events_since_snapshot = 0
        self._log: OpLog | None = None
        self._replaying = False
        if persist_dir is not None:
            self._log = OpLog(persist_dir, fsync=fsync)
            self._restore()

    # ------------------------------------------------------------------
    # persistence plumbing

    def _emit(self, event: dict) -> None:
        if self._log is None or self._replaying:
            return
        self._log.append(event)
        self._events_since_snapshot += 1
        if self._events_since_snapshot >= self.snapshot_every:
            self._snapshot_locked()

    def _restore(self) -> None:
        assert self._log is not None
        snapshot, events = self._log.load()
        self._replaying = True
        try:
            if snapshot is not None:
                self._load_snapshot(snapshot)
            for event in events:
                self._apply_event(event)
        finally:
            self._replaying = False
        # The previous process is gone; whatever it had in flight is
        # redelivered. Recorded as an event so later replays agree.
        with self._lock:
            if self._unacked:
                self._requeue_tags_locked(list(self._unacked), time.time())
            self._emit({"ev": "restart", "ts": time.time()})

    def _apply_event(self, event: dict) -> None:
        kind = event.get("ev")
        now = event.get("ts", time.time())
        with self._lock:
            if kind == "enq":
                self._enqueue_locked(event["env"], bool(event.get("force")), now)
            elif kind == "del":
                self._deliver_specific_locked(event["task_id"], event["consumer"], now, tag=event["tag"])
            elif kind == "ack":
                self._ack_locked(event["tag"], now)
            elif kind == "nack":
                self._nack_locked(event["tag"], event.get("exit"), now)
            elif kind == "req":
                self._requeue_tags_locked(event["tags"], now)
            elif kind == "purge":
                self._purge_locked(event.get("study"))
            elif kind == "restart":
                self._requeue_tags_locked(list(self._unacked), now)

    def _state_snapshot_locked(self) -> dict:
        return {
            "v": 1,
            "next_tag": self._next_tag,
            "next_seq": next(self._seq),
            "counters": dict(self._counters),
            "study_roots": dict(self._study_roots),
            "records": [r.to_dict(with_envelope=True) for r in self._records.values()],
            "unacked": [
                {"tag": tag, "task_id": tid, "consumer": consumer}
                for tag, (tid, consumer, _) in self._unacked.items()
            ],
        }

    def _load_snapshot(self, snapshot: dict) -> None:
        with self._lock:
            self._next_tag = snapshot["next_tag"]
            self._seq = itertools.count(snapshot["next_seq"])
            self._counters.update(snapshot["counters"])
            self._study_roots = dict(snapshot.get("study_roots", {}))
            for data in snapshot["records"]:
                rec = TaskRecord(data["envelope"], data["enqueued_ts"], queue_seq=0)
                rec.status = data["status"]
                rec.attempt = data["attempt"]
                rec.retries_remaining = data["retries_remaining"]
                rec.started_ts = data["started_ts"]
                rec.finished_ts = data["finished_ts"]
                rec.worker_id = data["worker_id"]
                rec.exit_code = data["exit_code"]
                rec.sample_width = data["sample_width"]
                self._records[rec.task_id] = rec
                if rec.status == STATUS_SUCCEEDED:
                    self._bump_progress_locked(rec, +1)
            for rec in self._records.values():
                if rec.status == STATUS_PENDING:
                    rec.queue_seq = next(self._seq)
                    heapq.heappush(self._ready, (-rec.priority, rec.queue_seq, rec.task_id))
            for entry in snapshot["unacked"]:
                self._unacked[entry["tag"]] = (entry["task_id"], entry["consumer"], time.monotonic())

    def _snapshot_locked(self) -> None:
        if self._log is None:
            return
        self._log.rewrite_snapshot(self._state_snapshot_locked())
        self._events_since_snapshot = 0

    def snapshot(self) -> None:
        """Force a snapshot now (also truncates the log)."""
        with self._lock:
            self._snapshot_locked()

    def close(self) -> None:
        with self._lock:
            if self._log is not None:
                self._snapshot_locked()
                self._log.close()

    # ------------------------------------------------------------------
    # helpers (call with lock held)

    def _bump_progress_locked(self, rec: TaskRecord, sign: int) -> None:
        key = (rec.study_id, rec.node_id)
        prog = self._node_progress.setdefault(key, {"samples": 0, "gen": 0})
        if rec.kind == KIND_GENERATION:
            prog["gen"] += sign
        else:
            prog["samples"] += sign * rec.sample_width

    def _push_ready_locked(self, rec: TaskRecord) -> None:
        rec.queue_seq = next(self._seq)
        rec.status = STATUS_PENDING
        heapq.heappush(self._ready, (-rec.priority, rec.queue_seq, rec.task_id))
        self._cond.notify()

    def _pop_ready_locked(self) -> TaskRecord | None:
        while self._ready:
            _, seq, task_id = heapq.heappop(self._ready)
            rec = self._records.get(task_id)
            if rec is not None and rec.status == STATUS_PENDING and rec.queue_seq == seq:
                return rec
        return None

    def _ready_count_locked(self, study_id: str | None) -> int:
        return sum(
            1
            for r in self._records.values()
            if r.status == STATUS_PENDING and (study_id is None or r.study_id == study_id)
        )

    # ------------------------------------------------------------------
    # core mutators (lock held)

    def _enqueue_locked(self, env: dict, force: bool, now: float) -> dict:
        task_id = env["task_id"]
        rec = self._records.get(task_id)
        if rec is not None:
            if rec.status in (STATUS_PENDING, STATUS_RUNNING):
                return {"task_id": task_id, "duplicate": True}
            if not force:
                return {"task_id": task_id, "duplicate": True}
            if rec.status == STATUS_SUCCEEDED:
                self._bump_progress_locked(rec, -1)
            rec.envelope = env
            rec.retries_remaining = env["retries"]
            rec.exit_code = None
            rec.enqueued_ts = now
            rec.finished_ts = None
            self._push_ready_locked(rec)
        else:
            rec = TaskRecord(env, now, queue_seq=0)
            self._records[task_id] = rec
            self._push_ready_locked(rec)
        root = env.get("payload", {}).get("study_root")
        if isinstance(root, str) and root:
            self._study_roots.setdefault(env["study_id"], root)
        self._counters["enqueued"] += 1
        return {"task_id": task_id, "duplicate": False}

    def _deliver_specific_locked(
        self, task_id: str, consumer: str, now: float, tag: int | None = None
    ) -> tuple[int, dict]:
        rec = self._records[task_id]
        if tag is None:
            tag = self._next_tag
        self._next_tag = max(self._next_tag, tag) + 1
        rec.status = STATUS_RUNNING
        rec.attempt += 1
        rec.started_ts = now
        rec.worker_id = consumer
        self._unacked[tag] = (task_id, consumer, time.monotonic())
        self._counters["delivered"] += 1
        return tag, rec.envelope

    def _finish_info_locked(self, rec: TaskRecord) -> dict:
        prog = self._node_progress.get((rec.study_id, rec.node_id), {"samples": 0, "gen": 0})
        return {
            "task_id": rec.task_id,
            "kind": rec.kind,
            "study_id": rec.study_id,
            "node_id": rec.node_id,
            "status": rec.status,
            "attempt": rec.attempt,
            "retries_remaining": rec.retries_remaining,
            "node_samples_succeeded": prog["samples"],
            "node_gen_succeeded": prog["gen"],
        }

    def _take_unacked_locked(self, tag: int) -> TaskRecord:
        entry = self._unacked.pop(tag, None)
        if entry is None:
            raise UnknownTagError(f"delivery tag {tag} is not in flight")
        return self._records[entry[0]]

    def _ack_locked(self, tag: int, now: float) -> dict:
        rec = self._take_unacked_locked(tag)
        rec.status = STATUS_SUCCEEDED
        rec.finished_ts = now
        rec.exit_code = 0
        self._counters["acked"] += 1
        self._bump_progress_locked(rec, +1)
        return self._finish_info_locked(rec)

    def _nack_locked(self, tag: int, exit_code: int | None, now: float) -> dict:
        rec = self._take_unacked_locked(tag)
        rec.finished_ts = now
        rec.exit_code = exit_code
        self._counters["failed"] += 1
        if rec.retries_remaining > 0:
            rec.retries_remaining -= 1
            rec.envelope = dict(rec.envelope, retries=rec.retries_remaining)
            rec.status = STATUS_FAILED  # transitional; re-enqueued below
            self._push_ready_locked(rec)
        else:
            rec.status = STATUS_DEAD
            self._counters["dead"] += 1
        return self._finish_info_locked(rec)

    def _requeue_tags_locked(self, tags: list[int], now: float) -> int:
        count = 0
        for tag in tags:
            entry = self._unacked.pop(tag, None)
            if entry is None:
                continue
            rec = self._records[entry[0]]
            self._push_ready_locked(rec)
            count += 1
        if count:
            self._counters["requeued"] += count
            self._cond.notify_all()
        return count

    def _expired_tags_locked(self, lease: float) -> list[int]:
        now = time.monotonic()
        return [
            tag
            for tag, (_, _, delivered) in self._unacked.items()
            if now - delivered > lease
        ]

    def _purge_locked(self, study_id: str | None) -> int:
        doomed = [
            tid
            for tid, rec in self._records.items()
            if rec.status == STATUS_PENDING
            and (study_id is None or rec.study_id == study_id)
        ]
        for tid in doomed:
            del self._records[tid]
        self._counters["purged"] += len(doomed)
        return len(doomed)

    # ------------------------------------------------------------------
    # public operations

    def enqueue(self, envelope: TaskEnvelope | dict, *, force: bool = False) -> dict:
        """Add an envelope to the ready queue (idempotent on task_id)."""
        env = envelope.to_dict() if isinstance(envelope, TaskEnvelope) else TaskEnvelope.from_dict(envelope).to_dict()
        size = len(canonical_json(env).encode("utf-8"))
        if size > self.message_size_limit:
            raise MessageTooLargeError(
                f"envelope {env['task_id']} is {size} bytes, "
                f"limit {self.message_size_limit}"
            )
        now = time.time()
        with self._lock:
            result = self._enqueue_locked(env, force, now)
            if not result["duplicate"]:
                self._emit({"ev": "enq", "env": env, "force": force, "ts": now})
        return result

    def consume(self, consumer_id: str, timeout: float = 0.0) -> tuple[int, TaskEnvelope] | None:
        """Deliver the highest-priority ready envelope, or None on timeout."""
        deadline = time.monotonic() + max(timeout, 0.0)
        with self._cond:
            while True:
                if self.default_lease is not None:
                    expired = self._expired_tags_locked(self.default_lease)
                    if expired:
                        now = time.time()
                        self._requeue_tags_locked(expired, now)
                        self._emit({"ev": "req", "tags": expired, "ts": now})
                rec = self._pop_ready_locked()
                if rec is not None:
                    now = time.time()
                    tag, env = self._deliver_specific_locked(rec.task_id, consumer_id, now)
                    self._emit(
                        {"ev": "del", "task_id": rec.task_id, "tag": tag,
                         "consumer": consumer_id, "ts": now}
                    )
                    return tag, TaskEnvelope.from_dict(env)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(min(remaining, 0.25))

    def ack(self, tag: int) -> dict:
        """Mark a delivery successful."""
        now = time.time()
        with self._lock:
            info = self._ack_locked(tag, now)
            self._emit({"ev": "ack", "tag": tag, "ts": now})
        return info

    def nack(self, tag: int, exit_code: int | None = None) -> dict:
        """Mark a delivery failed; retries or records the task as dead."""
        now = time.time()
        with self._lock:
            info = self._nack_locked(tag, exit_code, now)
            self._emit({"ev": "nack", "tag": tag, "exit": exit_code, "ts": now})
        return info

    def requeue_expired(self, lease: float | None = None) -> int:
        """Return expired deliveries to the ready queue; count returned."""
        lease = self.default_lease if lease is None else lease
        now = time.time()
        with self._lock:
            expired = self._expired_tags_locked(lease)
            count = self._requeue_tags_locked(expired, now)
            if count:
                self._emit({"ev": "req", "tags": expired, "ts": now})
        return count

    def purge(self, study_id: str | None = None) -> int:
        """Drop ready envelopes (per study or all); in-flight work is untouched."""
        with self._lock:
            count = self._purge_locked(study_id)
            if count:
                self._emit({"ev": "purge", "study": study_id, "ts": time.time()})
        return count

    def ping(self) -> str:
        return "pong"

    def stats(self, study_id: str | None = None, *, detail: bool = False) -> dict:
        """Read-only snapshot of counters and per-status task counts."""
        with self._lock:
            records = [
                r for r in self._records.values()
                if study_id is None or r.study_id == study_id
            ]
            tasks = dict.fromkeys(STATUSES, 0)
            kinds: dict[str, dict[str, int]] = {}
            first_started = first_real_started = last_finished = None
            for rec in records:
                tasks[rec.status] += 1
                kinds.setdefault(rec.kind, dict.fromkeys(STATUSES, 0))[rec.status] += 1
                if rec.started_ts is not None:
                    if first_started is None or rec.started_ts < first_started:
                        first_started = rec.started_ts
                    if rec.kind == KIND_REAL and (
                        first_real_started is None or rec.started_ts < first_real_started
                    ):
                        first_real_started = rec.started_ts
                if rec.finished_ts is not None and (
                    last_finished is None or rec.finished_ts > last_finished
                ):
                    last_finished = rec.finished_ts
            data: dict = {
                "counters": dict(self._counters),
                "tasks": tasks,
                "kinds": kinds,
                "ready": self._ready_count_locked(study_id),
                "unacked": sum(
                    1 for tid, _, _ in self._unacked.values()
                    if study_id is None or self._records[tid].study_id == study_id
                ),
                "first_started": first_started,
                "first_real_started": first_real_started,
                "last_finished": last_finished,
            }
            if study_id is None:
                data["studies"] = sorted({r.study_id for r in self._records.values()})
            else:
                data["study_root"] = self._study_roots.get(study_id)
                nodes: dict[str, dict] = {}
                for rec in records:
                    node = nodes.setdefault(
                        rec.node_id,
                        {"samples_succeeded": 0, "gen_succeeded": 0,
                         "tasks": dict.fromkeys(STATUSES, 0)},
                    )
                    node["tasks"][rec.status] += 1
                for (sid, node_id), prog in self._node_progress.items():
                    if sid != study_id:
                        continue
                    node = nodes.setdefault(
                        node_id,
                        {"samples_succeeded": 0, "gen_succeeded": 0,
                         "tasks": dict.fromkeys(STATUSES, 0)},
                    )
                    node["samples_succeeded"] = prog["samples"]
                    node["gen_succeeded"] = prog["gen"]
                data["nodes"] = nodes
            if detail:
                data["records"] = [r.to_dict(with_envelope=True) for r in records]
            return data
