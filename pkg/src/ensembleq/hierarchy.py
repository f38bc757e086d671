"""Hierarchical task generation: b-ary fan-out over N samples.

Enqueuing a study posts one root generation task per ready step instance.
Workers expand generation tasks recursively: a range wider than b splits
into at most b near-equal contiguous child ranges; a range of width <= b
fans out into the real per-sample tasks. Real tasks carry a strictly
higher priority than generation tasks so workers drain simulations before
creating more work.

Task ids are content-addressed (study, node, range), with the study id
supplying 128 bits of randomness. Re-expanding a redelivered generation
task therefore re-produces the same child ids, and the broker treats the
second enqueue as a no-op.
"""

from __future__ import annotations

import hashlib
import os
import uuid
from dataclasses import dataclass

from .dag import ExpandedDag, StepInstance
from .envelope import KIND_GENERATION, KIND_REAL, KIND_STEP_ONCE, TaskEnvelope
from .errors import ConfigError, CorruptEnvelopeError, MessageTooLargeError
from .samples import SampleSet, write_samples_csv
from .specfile import WorkflowSpec
from . import study as study_io


@dataclass(frozen=True)
class HierarchyPlan:
    """Shape of the fan-out: N samples, branching factor b, level count."""

    n: int
    b: int
    depth: int

    def root_range(self) -> tuple[int, int]:
        return (0, self.n)

    def is_leaf_range(self, lo: int, hi: int) -> bool:
        """Leaf-level ranges spawn real tasks directly."""
        return hi - lo <= self.b

    def split_range(self, lo: int, hi: int) -> list[tuple[int, int]]:
        """Split [lo, hi) into <= b contiguous chunks, widths differing <= 1."""
        width = hi - lo
        if width <= self.b:
            raise ValueError(f"range [{lo}, {hi}) is already leaf-level")
        per_child = -(-width // self.b)          # ceil(width / b)
        children = -(-width // per_child)        # ceil(width / per_child)
        base, extra = divmod(width, children)
        out = []
        cursor = lo
        for i in range(children):
            w = base + (1 if i < extra else 0)
            out.append((cursor, cursor + w))
            cursor += w
        return out


def plan_hierarchy(n: int, b: int) -> HierarchyPlan:
    """Plan the generation hierarchy for n samples with branching factor b."""
    if b < 2:
        raise ConfigError(f"branching factor must be >= 2, got {b}")
    if n < 0:
        raise ConfigError(f"sample count must be >= 0, got {n}")
    if n <= 1:
        return HierarchyPlan(n=n, b=b, depth=1)
    depth = 1
    capacity = b
    while capacity < n:
        capacity *= b
        depth += 1
    return HierarchyPlan(n=n, b=b, depth=depth)


def generation_task_count(n: int, b: int) -> int:
    """Number of generation tasks one root expands into (root included)."""
    plan = plan_hierarchy(n, b)
    memo: dict[int, int] = {}

    def count(width: int) -> int:
        if width <= b:
            return 1
        if width not in memo:
            children = plan.split_range(0, width)
            memo[width] = 1 + sum(count(hi - lo) for lo, hi in children)
        return memo[width]

    return count(n)


def new_study_id() -> str:
    """Fresh random 128-bit study id (hex)."""
    return uuid.uuid4().hex


def task_id_for(study_id: str, node_id: str, kind: str, lo: int, hi: int) -> str:
    """Deterministic 128-bit task id; unique across studies via study_id."""
    key = f"{study_id}/{node_id}/{kind}/{lo}/{hi}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:32]


def _require_payload(task: TaskEnvelope, key: str):
    try:
        return task.payload[key]
    except (KeyError, TypeError):
        raise CorruptEnvelopeError(
            f"envelope {task.task_id} payload is missing {key!r}"
        ) from None


def make_payload(study_root: str, n: int, b: int, priority_real: int, retries: int) -> dict:
    return {
        "study_root": str(study_root),
        "n": n,
        "b": b,
        "priority_real": priority_real,
        "retries": retries,
    }


def root_envelope(
    study_id: str,
    node: StepInstance,
    *,
    n: int,
    b: int,
    priority_real: int,
    priority_generation: int,
    retries: int,
    study_root: str,
) -> TaskEnvelope:
    """The single task that starts a step instance: a generation root for
    sample-scoped steps, a step_once task otherwise."""
    payload = make_payload(study_root, n, b, priority_real, retries)
    if node.sample_scoped:
        return TaskEnvelope(
            task_id=task_id_for(study_id, node.node_id, "g", 0, n),
            kind=KIND_GENERATION,
            study_id=study_id,
            priority=priority_generation,
            node_id=node.node_id,
            range=(0, n),
            retries=retries,
            payload=payload,
        )
    return TaskEnvelope(
        task_id=task_id_for(study_id, node.node_id, "o", 0, 1),
        kind=KIND_STEP_ONCE,
        study_id=study_id,
        priority=priority_real,
        node_id=node.node_id,
        retries=retries,
        payload=payload,
    )


def real_envelope(task: TaskEnvelope, lo: int, hi: int) -> TaskEnvelope:
    """A real task covering samples [lo, hi) of a generation task's node."""
    priority_real = _require_payload(task, "priority_real")
    retries = _require_payload(task, "retries")
    single = hi - lo == 1
    return TaskEnvelope(
        task_id=task_id_for(task.study_id, task.node_id, "r", lo, hi),
        kind=KIND_REAL,
        study_id=task.study_id,
        priority=priority_real,
        node_id=task.node_id,
        range=None if single else (lo, hi),
        sample=lo if single else None,
        retries=retries,
        payload=dict(task.payload),
    )


def expand_generation_task(
    task: TaskEnvelope, plan: HierarchyPlan, *, bundle_size: int = 1
) -> list[TaskEnvelope]:
    """Children of a generation task: either the next generation level, or
    the real per-sample tasks once the range is leaf-level.

    ``bundle_size > 1`` groups leaf samples so one real envelope executes
    several contiguous samples serially in a single consumer slot.
    """
    if task.kind != KIND_GENERATION:
        raise CorruptEnvelopeError(
            f"cannot expand a {task.kind!r} envelope ({task.task_id})"
        )
    if task.range is None:
        raise CorruptEnvelopeError(f"generation envelope {task.task_id} has no range")
    lo, hi = task.range
    if plan.is_leaf_range(lo, hi):
        step = max(1, bundle_size)
        return [
            real_envelope(task, a, min(a + step, hi))
            for a in range(lo, hi, step)
        ]
    children = []
    for clo, chi in plan.split_range(lo, hi):
        children.append(
            TaskEnvelope(
                task_id=task_id_for(task.study_id, task.node_id, "g", clo, chi),
                kind=KIND_GENERATION,
                study_id=task.study_id,
                priority=task.priority,
                node_id=task.node_id,
                range=(clo, chi),
                retries=task.retries,
                payload=dict(task.payload),
            )
        )
    return children


def planned_task_counts(spec: WorkflowSpec, dag: ExpandedDag, n: int) -> dict[str, int]:
    """Total generation/real/once tasks a full study run will create."""
    b = spec.sample_config.branching_factor
    gen = real = once = 0
    for node in dag.nodes:
        if node.sample_scoped:
            gen += generation_task_count(n, b)
            real += n
        else:
            once += 1
    return {"generation": gen, "real": real, "once": once, "total": gen + real + once}


def prepare_study(
    spec: WorkflowSpec,
    dag: ExpandedDag,
    samples: SampleSet,
    *,
    workspace_root: str | None = None,
    spec_text: str | None = None,
) -> tuple[str, str]:
    """Create the study directory with samples.csv and provenance.

    Returns (study_id, study_root). No broker contact happens here, so
    dry runs can materialize everything without a queue.
    """
    study_id = new_study_id()
    root = study_io.study_root_for(
        workspace_root or spec.run_config.workspace_root, study_id
    )
    os.makedirs(root, exist_ok=True)
    write_samples_csv(samples, os.path.join(root, study_io.SAMPLES_FILENAME))
    study_io.write_study_provenance(
        root,
        study_id=study_id,
        spec=spec,
        dag=dag,
        n=samples.n,
        spec_text=spec_text,
    )
    return study_id, root


def enqueue_study(
    spec: WorkflowSpec,
    dag: ExpandedDag,
    samples: SampleSet,
    broker,
    *,
    workspace_root: str | None = None,
    spec_text: str | None = None,
) -> str:
    """Post the metadata-only root tasks for a study and return its id.

    Writes ``samples.csv`` and the study provenance file into a fresh
    study directory, then posts exactly one envelope per ready step
    instance — broker traffic stays O(K) however large N is.
    """
    rc = spec.run_config
    n = samples.n
    b = spec.sample_config.branching_factor
    study_id, root = prepare_study(
        spec, dag, samples, workspace_root=workspace_root, spec_text=spec_text
    )

    ready = [node for node in dag.nodes if not dag.predecessors(node.node_id)]
    for node in ready:
        env = root_envelope(
            study_id,
            node,
            n=n,
            b=b,
            priority_real=rc.task_priority_real,
            priority_generation=rc.task_priority_generation,
            retries=spec.step(node.step).max_retries,
            study_root=root,
        )
        if env.encoded_size() > rc.message_size_limit:
            raise MessageTooLargeError(
                f"envelope {env.task_id} is {env.encoded_size()} bytes, "
                f"limit {rc.message_size_limit}"
            )
        broker.enqueue(env)
    return study_id
