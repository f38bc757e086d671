"""The consumer side: pull envelopes, expand generation tasks, execute
real work in unique workspaces, and drive dependency progression.

Execution effects are idempotent: a task writes its success marker
(``.done``, atomic rename) into its workspace, and a redelivered task
whose marker already exists is acknowledged without re-running. That is
what makes at-least-once delivery safe.

Fan-in is detected through the broker, not the filesystem: every
acknowledgement returns the node's success counters, and the worker that
completes a node enqueues whichever dependent step instances became
ready. Those follow-on envelopes have deterministic task ids, so racing
workers cannot double-enqueue a join step.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import threading
import time
from dataclasses import dataclass, field

from .broker import STATUS_DEAD
from .envelope import KIND_GENERATION, KIND_REAL, TaskEnvelope, canonical_json
from .errors import (
    BrokerUnreachableError,
    EnsembleError,
    SpawnError,
    UnknownStudyError,
    WorkspaceError,
)
from .hierarchy import (
    expand_generation_task,
    make_payload,
    plan_hierarchy,
    root_envelope,
    task_id_for,
)
from .study import DONE_FILENAME, StudyCache, StudyContext, load_study
from .subst import substitute

log = logging.getLogger(__name__)

SCRIPT_FILENAME = "exec.sh"
STDOUT_FILENAME = "stdout.log"
STDERR_FILENAME = "stderr.log"
DEFAULT_LOG_CAP = 16 * 1024 * 1024
HEARTBEAT_INTERVAL = 5.0


@dataclass
class WorkerConfig:
    worker_id: str
    endpoint: str
    workspace_root: str
    concurrency: int = 1
    bundle_size: int = 1
    poll_timeout: float = 0.5
    idle_exit: float | None = None
    log_cap: int = DEFAULT_LOG_CAP
    connect_retries: int = 10

    def __post_init__(self) -> None:
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.bundle_size < 1:
            raise ValueError("bundle_size must be >= 1")


@dataclass
class ExecutionResult:
    """Outcome and timing of one task execution."""

    task_id: str
    node_id: str
    sample: int | None
    exit_code: int
    wall_time: float
    overhead_time: float
    started: float
    finished: float
    worker_id: str
    stdout_path: str
    stderr_path: str
    cached: bool = False

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "node_id": self.node_id,
            "sample": self.sample,
            "exit_code": self.exit_code,
            "wall_time": self.wall_time,
            "overhead_time": self.overhead_time,
            "started": self.started,
            "finished": self.finished,
            "worker_id": self.worker_id,
            "stdout": self.stdout_path,
            "stderr": self.stderr_path,
        }

    @classmethod
    def from_dict(cls, data: dict, *, cached: bool = False) -> "ExecutionResult":
        return cls(
            task_id=data["task_id"],
            node_id=data["node_id"],
            sample=data["sample"],
            exit_code=data["exit_code"],
            wall_time=data["wall_time"],
            overhead_time=data["overhead_time"],
            started=data["started"],
            finished=data["finished"],
            worker_id=data["worker_id"],
            stdout_path=data["stdout"],
            stderr_path=data["stderr"],
            cached=cached,
        )


def _dependency_workspace(ctx: StudyContext, dep_step: str, param_index: int) -> str:
    """The dependency's parameter-matched workspace root, or the step root
    when the reference is a fan-in over many instances."""
    candidates = [n for n in ctx.dag.nodes if n.step == dep_step]
    if len(candidates) == 1:
        return os.path.join(ctx.root, candidates[0].workspace_path)
    for node in candidates:
        if node.parameter_index == param_index:
            return os.path.join(ctx.root, node.workspace_path)
    return ctx.step_root(dep_step)


def runtime_bindings(ctx: StudyContext, node_id: str, sample: int | None) -> dict[str, str]:
    """Token bindings resolved at execution time (everything but parameters)."""
    node = ctx.node(node_id)
    step = ctx.spec.step(node.step)
    workspace = ctx.task_workspace(node_id, sample)
    bindings: dict[str, str] = dict(ctx.spec.env_vars)
    bindings["WORKSPACE"] = workspace
    bindings["SPEC_ROOT"] = ctx.spec_root
    if sample is not None:
        bindings["SAMPLE_ID"] = str(sample)
        if sample < ctx.samples.n:
            for col, value in zip(ctx.samples.columns, ctx.samples.rows[sample]):
                bindings[f"SAMPLE.{col}"] = value
    for dep in step.dependency_names():
        bindings[f"{dep}.workspace"] = _dependency_workspace(ctx, dep, node.parameter_index)
    return bindings


def read_done_marker(workspace: str) -> ExecutionResult | None:
    path = os.path.join(workspace, DONE_FILENAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return ExecutionResult.from_dict(json.load(fh), cached=True)
    except FileNotFoundError:
        return None
    except (json.JSONDecodeError, KeyError):
        return None  # corrupt marker: treat as absent and re-run


def _write_done_marker(workspace: str, result: ExecutionResult) -> None:
    path = os.path.join(workspace, DONE_FILENAME)
    tmp = f"{path}.{os.getpid()}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(result.to_dict()))
        fh.write("\n")
    os.replace(tmp, path)


def _truncate(path: str, cap: int) -> None:
    try:
        if os.path.getsize(path) > cap:
            with open(path, "ab") as fh:
                fh.truncate(cap)
    except OSError:
        pass


def execute_task(
    envelope: TaskEnvelope,
    ctx: StudyContext,
    *,
    worker_id: str = "local",
    received_at: float | None = None,
    sample: int | None = None,
    log_cap: int = DEFAULT_LOG_CAP,
    extra_env: dict[str, str] | None = None,
) -> ExecutionResult:
    """Run one real/step_once task in its own workspace directory.

    Creates ``<study>/<step>/<label>[/<padded sample>]``, writes the
    substituted command to ``exec.sh``, runs it under the step's shell
    with stdout/stderr captured to files, and on exit 0 atomically writes
    the ``.done`` marker. If the marker already exists the recorded
    result is returned without re-executing.
    """
    received_at = time.time() if received_at is None else received_at
    node = ctx.node(envelope.node_id)
    step = ctx.spec.step(node.step)
    if sample is None:
        sample = envelope.sample
    if not node.sample_scoped:
        sample = None
    workspace = ctx.task_workspace(envelope.node_id, sample)

    cached = read_done_marker(workspace)
    if cached is not None:
        return cached

    try:
        os.makedirs(workspace, exist_ok=True)
    except OSError as exc:
        raise WorkspaceError(f"cannot create workspace {workspace}: {exc}") from exc

    bindings = runtime_bindings(ctx, envelope.node_id, sample)
    script_body = substitute(
        node.resolved_command, bindings, context=f"step {node.step}"
    )
    script_path = os.path.join(workspace, SCRIPT_FILENAME)
    with open(script_path, "w", encoding="utf-8") as fh:
        fh.write(f"#!{step.shell}\n")
        fh.write(script_body)
    os.chmod(script_path, 0o755)

    env = dict(os.environ)
    env.update(ctx.spec.env_vars)
    if extra_env:
        env.update(extra_env)

    stdout_path = os.path.join(workspace, STDOUT_FILENAME)
    stderr_path = os.path.join(workspace, STDERR_FILENAME)
    started = time.time()
    wall_start = time.monotonic()
    try:
        with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
            proc = subprocess.run(
                [step.shell, SCRIPT_FILENAME],
                cwd=workspace,
                env=env,
                stdout=out,
                stderr=err,
            )
    except FileNotFoundError as exc:
        raise SpawnError(f"shell {step.shell!r} not found for step {node.step}") from exc
    except OSError as exc:
        raise SpawnError(f"cannot start step {node.step}: {exc}") from exc
    wall = time.monotonic() - wall_start
    _truncate(stdout_path, log_cap)
    _truncate(stderr_path, log_cap)

    finished = time.time()
    result = ExecutionResult(
        task_id=envelope.task_id,
        node_id=envelope.node_id,
        sample=sample,
        exit_code=proc.returncode,
        wall_time=wall,
        overhead_time=max(0.0, (finished - received_at) - wall),
        started=started,
        finished=finished,
        worker_id=worker_id,
        stdout_path=STDOUT_FILENAME,
        stderr_path=STDERR_FILENAME,
    )
    if proc.returncode == 0:
        _write_done_marker(workspace, result)
    return result


def execute_bundle(
    envelope: TaskEnvelope,
    ctx: StudyContext,
    *,
    worker_id: str = "local",
    received_at: float | None = None,
    log_cap: int = DEFAULT_LOG_CAP,
    extra_env: dict[str, str] | None = None,
) -> list[ExecutionResult]:
    """Execute every sample of a bundled real envelope serially.

    Per-sample workspaces and markers are identical to single-sample
    execution; the caller issues a single ack for the whole bundle. All
    samples run even if one fails, so reruns only repeat the failures.
    """
    results = []
    clock = received_at if received_at is not None else time.time()
    for index in envelope.sample_indices():
        results.append(
            execute_task(
                envelope,
                ctx,
                worker_id=worker_id,
                received_at=clock,
                sample=index,
                log_cap=log_cap,
                extra_env=extra_env,
            )
        )
        clock = time.time()
    return results


# ---------------------------------------------------------------------------
# dependency progression


def node_is_complete(ctx: StudyContext, progress: dict, node_id: str) -> bool:
    prog = progress.get(node_id, {})
    expected = ctx.expected_samples(node_id)
    if expected == 0:
        return prog.get("gen_succeeded", 0) >= 1
    return prog.get("samples_succeeded", 0) >= expected


def advance_dependencies(client, ctx: StudyContext, completed_node: str) -> list[str]:
    """Enqueue root envelopes for dependents that just became ready.

    Safe under races: follow-on task ids are deterministic, so concurrent
    callers collapse into a single accepted enqueue per step instance.
    """
    progress = client.stats(ctx.study_id).get("nodes", {})
    if not node_is_complete(ctx, progress, completed_node):
        return []
    rc = ctx.spec.run_config
    started: list[str] = []
    for succ in sorted(ctx.dag.successors(completed_node)):
        if node_is_complete(ctx, progress, succ):
            continue
        if not all(
            node_is_complete(ctx, progress, pred)
            for pred in ctx.dag.predecessors(succ)
        ):
            continue
        node = ctx.node(succ)
        env = root_envelope(
            ctx.study_id,
            node,
            n=ctx.n,
            b=ctx.b,
            priority_real=rc.task_priority_real,
            priority_generation=rc.task_priority_generation,
            retries=ctx.spec.step(node.step).max_retries,
            study_root=ctx.root,
        )
        if not client.enqueue(env)["duplicate"]:
            started.append(succ)
    return started


# ---------------------------------------------------------------------------
# resubmission


def _resolve_study(client, study: str) -> tuple[str, str | None]:
    """Accept a study id or a study directory path; return (id, root)."""
    if os.path.isdir(study):
        ctx = load_study(study)
        return ctx.study_id, ctx.root
    root = None
    if client is not None:
        root = client.stats(study).get("study_root")
    return study, root


def resubmit(client, study: str, scope: str) -> int:
    """Re-enqueue work for a study: dead tasks or missing success markers."""
    if scope not in ("failed", "missing"):
        raise ValueError(f"unknown resubmit scope {scope!r}")
    study_id, root = _resolve_study(client, study)
    if scope == "failed":
        stats = client.stats(study_id, detail=True)
        if not stats["records"]:
            raise UnknownStudyError(f"broker has no tasks for study {study_id}")
        count = 0
        for rec in stats["records"]:
            if rec["status"] != STATUS_DEAD:
                continue
            env = TaskEnvelope.from_dict(rec["envelope"])
            env.retries = env.payload.get("retries", env.retries)
            if not client.enqueue(env, force=True)["duplicate"]:
                count += 1
        return count

    if root is None:
        raise UnknownStudyError(
            f"cannot locate workspace for study {study}; pass its directory instead"
        )
    ctx = load_study(root)
    rc = ctx.spec.run_config
    count = 0
    marked: dict[str, bool] = {}

    def fully_marked(node_id: str) -> bool:
        if node_id not in marked:
            missing = _missing_samples(ctx, node_id)
            marked[node_id] = not missing
        return marked[node_id]

    for node in ctx.dag.nodes:
        if not all(fully_marked(p) for p in ctx.dag.predecessors(node.node_id)):
            continue
        step = ctx.spec.step(node.step)
        payload = make_payload(
            ctx.root, ctx.n, ctx.b, rc.task_priority_real, step.max_retries
        )
        for sample in _missing_samples(ctx, node.node_id):
            if sample is None:
                env = root_envelope(
                    ctx.study_id,
                    node,
                    n=ctx.n,
                    b=ctx.b,
                    priority_real=rc.task_priority_real,
                    priority_generation=rc.task_priority_generation,
                    retries=step.max_retries,
                    study_root=ctx.root,
                )
            else:
                env = TaskEnvelope(
                    task_id=task_id_for(ctx.study_id, node.node_id, "r", sample, sample + 1),
                    kind=KIND_REAL,
                    study_id=ctx.study_id,
                    priority=rc.task_priority_real,
                    node_id=node.node_id,
                    sample=sample,
                    retries=step.max_retries,
                    payload=payload,
                )
            if not client.enqueue(env, force=True)["duplicate"]:
                count += 1
    return count


def _missing_samples(ctx: StudyContext, node_id: str) -> list[int | None]:
    """Sample indices (or [None] for once nodes) lacking a success marker."""
    node = ctx.node(node_id)
    if not node.sample_scoped:
        marker = os.path.join(ctx.task_workspace(node_id, None), DONE_FILENAME)
        return [] if os.path.isfile(marker) else [None]
    missing: list[int | None] = []
    for sample in range(ctx.n):
        marker = os.path.join(ctx.task_workspace(node_id, sample), DONE_FILENAME)
        if not os.path.isfile(marker):
            missing.append(sample)
    return missing


# ---------------------------------------------------------------------------
# the worker loop


class Worker:
    """Hosts `concurrency` consumer slots against one broker endpoint."""

    def __init__(self, config: WorkerConfig, client_factory):
        self.config = config
        self._client_factory = client_factory
        self._stop = threading.Event()
        self._studies = StudyCache()
        self._last_activity = time.monotonic()
        self._processed = 0
        self._count_lock = threading.Lock()

    @property
    def processed(self) -> int:
        return self._processed

    def stop(self) -> None:
        """Request shutdown; slots finish their in-flight task first."""
        self._stop.set()

    def run(self) -> int:
        """Run until stopped (or idle-exit); returns tasks processed."""
        self._client_factory().close()  # fail fast if the broker is unreachable
        self._last_activity = time.monotonic()
        threads = [
            threading.Thread(target=self._slot_loop, args=(i,), name=f"slot-{i}")
            for i in range(self.config.concurrency)
        ]
        beat = threading.Thread(target=self._heartbeat_loop, name="heartbeat", daemon=True)
        for t in threads:
            t.start()
        beat.start()
        for t in threads:
            t.join()
        self._stop.set()
        return self._processed

    # -- internals

    def _note_activity(self) -> None:
        self._last_activity = time.monotonic()

    def _idle_expired(self) -> bool:
        idle = self.config.idle_exit
        return idle is not None and time.monotonic() - self._last_activity > idle

    def _slot_loop(self, slot: int) -> None:
        consumer_id = f"{self.config.worker_id}.{slot}"
        client = self._connect(slot)
        if client is None:
            return
        while not self._stop.is_set():
            try:
                got = client.consume(consumer_id, timeout=self.config.poll_timeout)
            except BrokerUnreachableError:
                client.close()
                client = self._connect(slot)
                if client is None:
                    return
                continue
            if got is None:
                if self._idle_expired():
                    self._stop.set()
                continue
            self._note_activity()
            tag, envelope = got
            received = time.time()
            try:
                self._dispatch(client, tag, envelope, received)
            except BrokerUnreachableError:
                log.warning("slot %s lost the broker mid-task; lease will recover it", slot)
                client.close()
                client = self._connect(slot)
                if client is None:
                    return
            with self._count_lock:
                self._processed += 1
            self._note_activity()
        client.close()

    def _connect(self, slot: int):
        delay = 0.2
        for attempt in range(self.config.connect_retries):
            if self._stop.is_set():
                return None
            try:
                return self._client_factory()
            except BrokerUnreachableError:
                if attempt == self.config.connect_retries - 1:
                    break
                time.sleep(delay)
                delay = min(delay * 2, 5.0)
        log.error("slot %s giving up on broker %s", slot, self.config.endpoint)
        self._stop.set()
        return None

    def _dispatch(self, client, tag: int, envelope: TaskEnvelope, received: float) -> None:
        try:
            ctx = self._studies.get(envelope.payload["study_root"])
        except (KeyError, TypeError, EnsembleError) as exc:
            log.error("task %s has no loadable study: %s", envelope.task_id, exc)
            client.nack(tag)
            return

        if envelope.kind == KIND_GENERATION:
            self._run_generation(client, tag, envelope, ctx)
        else:
            self._run_real(client, tag, envelope, ctx, received)

    def _run_generation(self, client, tag: int, envelope: TaskEnvelope, ctx) -> None:
        try:
            plan = plan_hierarchy(envelope.payload["n"], envelope.payload["b"])
            children = expand_generation_task(
                envelope, plan, bundle_size=self.config.bundle_size
            )
            for child in children:
                client.enqueue(child)
        except BrokerUnreachableError:
            raise
        except (KeyError, EnsembleError) as exc:
            log.error("generation task %s failed: %s", envelope.task_id, exc)
            client.nack(tag)
            return
        info = client.ack(tag)
        log.debug("expanded %s into %d children", envelope.task_id, len(children))
        self._after_success(client, ctx, info)

    def _run_real(self, client, tag: int, envelope: TaskEnvelope, ctx, received: float) -> None:
        extra_env = {
            "ENSEMBLE_BROKER": self.config.endpoint,
            "ENSEMBLE_WORKSPACE": self.config.workspace_root,
        }
        kwargs = dict(
            worker_id=self.config.worker_id,
            received_at=received,
            log_cap=self.config.log_cap,
            extra_env=extra_env,
        )
        try:
            if envelope.range is not None:
                results = execute_bundle(envelope, ctx, **kwargs)
            else:
                results = [execute_task(envelope, ctx, **kwargs)]
        except BrokerUnreachableError:
            raise
        except SpawnError as exc:
            log.error("task %s: %s", envelope.task_id, exc)
            client.nack(tag, exit_code=127)
            return
        except EnsembleError as exc:
            log.error("task %s: %s", envelope.task_id, exc)
            client.nack(tag)
            return
        failures = [r for r in results if r.exit_code != 0]
        if failures:
            statuses = ["ok" if r.exit_code == 0 else "fail" for r in results]
            log.info("task %s failed (%s)", envelope.task_id, ",".join(statuses))
            client.nack(tag, exit_code=failures[0].exit_code)
            return
        info = client.ack(tag)
        self._after_success(client, ctx, info)

    def _after_success(self, client, ctx, info: dict) -> None:
        if not node_is_complete(
            ctx,
            {info["node_id"]: {
                "samples_succeeded": info["node_samples_succeeded"],
                "gen_succeeded": info["node_gen_succeeded"],
            }},
            info["node_id"],
        ):
            return
        started = advance_dependencies(client, ctx, info["node_id"])
        if started:
            log.info("study %s: started %s", ctx.study_id, ", ".join(started))

    def _heartbeat_loop(self) -> None:
        directory = os.path.join(self.config.workspace_root, ".workers")
        path = os.path.join(directory, f"{self.config.worker_id}.jsonl")
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError:
            return
        while True:
            beat = {
                "ts": time.time(),
                "worker_id": self.config.worker_id,
                "processed": self._processed,
                "stopping": self._stop.is_set(),
            }
            try:
                with open(path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_json(beat) + "\n")
            except OSError:
                pass
            if self._stop.wait(HEARTBEAT_INTERVAL):
                break


def run_worker(config: WorkerConfig, client_factory) -> int:
    """Run a worker until drained-and-idle or stopped; returns task count."""
    return Worker(config, client_factory).run()
