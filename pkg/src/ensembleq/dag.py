"""Expansion of the compact step graph over parameter combinations.

Each step becomes either one node (no parameters involved) or K nodes,
one per parameter combination. Plain dependencies connect matching
combination indices; a ``_*`` suffix fans in from every instance of the
named step. Expansion order follows step declaration order, then
combination index, so the result is deterministic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ExpansionError
from .specfile import PER_SAMPLE, WorkflowSpec, resolve_command
from .subst import find_tokens

_SANITIZE = re.compile(r"[/\s]+")


def sanitize_label_value(value: str) -> str:
    """Make a parameter value safe for use in a directory name."""
    return _SANITIZE.sub("_", value)


def node_id_for(step: str, parameter_index: int) -> str:
    return f"{step}@{parameter_index}"


@dataclass(frozen=True)
class StepInstance:
    """One (step, parameter combination) node of the expanded graph."""

    node_id: str
    step: str
    parameter_index: int
    parameter_label: str
    resolved_command: str
    workspace_path: str
    sample_scoped: bool


@dataclass
class ExpandedDag:
    """The parameter-expanded step graph."""

    nodes: list[StepInstance] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)
    root_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_id = {n.node_id: n for n in self.nodes}
        self._preds: dict[str, set[str]] = {n.node_id: set() for n in self.nodes}
        self._succs: dict[str, set[str]] = {n.node_id: set() for n in self.nodes}
        for src, dst in self.edges:
            self._preds[dst].add(src)
            self._succs[src].add(dst)

    def node(self, node_id: str) -> StepInstance:
        return self._by_id[node_id]

    def predecessors(self, node_id: str) -> set[str]:
        return set(self._preds[node_id])

    def successors(self, node_id: str) -> set[str]:
        return set(self._succs[node_id])


def _parameterized_steps(spec: WorkflowSpec) -> set[str]:
    """Steps with K instances: those using parameter tokens, or with a
    plain dependency (not ``_*``) on a parameterized step."""
    param_names = set(spec.parameters.entries)
    direct = {
        s.name
        for s in spec.steps
        if param_names & set(find_tokens(s.command))
    }
    changed = True
    while changed:
        changed = False
        for s in spec.steps:
            if s.name in direct:
                continue
            for dep in s.depends:
                if not dep.endswith("_*") and dep in direct:
                    direct.add(s.name)
                    changed = True
                    break
    return direct


def _label_for(spec: WorkflowSpec, index: int) -> str:
    parts = []
    for name, p in spec.parameters.entries.items():
        value = sanitize_label_value(p.values[index])
        parts.append(p.label.replace("%%", value, 1))
    return ".".join(parts)


def expand(spec: WorkflowSpec) -> ExpandedDag:
    """Expand the step graph over all parameter combinations."""
    step_names = {s.name for s in spec.steps}
    for step in spec.steps:
        for dep in step.dependency_names():
            if dep not in step_names:
                raise ExpansionError(
                    f"step {step.name!r} depends on unknown step {dep!r}"
                )

    k = spec.parameters.combination_count()
    parameterized = _parameterized_steps(spec)

    nodes: list[StepInstance] = []
    instances: dict[str, list[str]] = {}
    for step in spec.steps:
        count = k if step.name in parameterized else 1
        ids = []
        for i in range(count):
            label = _label_for(spec, i) if step.name in parameterized else ""
            workspace = f"{step.name}/{label}" if label else step.name
            node = StepInstance(
                node_id=node_id_for(step.name, i),
                step=step.name,
                parameter_index=i,
                parameter_label=label,
                resolved_command=resolve_command(spec, step, i),
                workspace_path=workspace,
                sample_scoped=step.run_mode == PER_SAMPLE,
            )
            nodes.append(node)
            ids.append(node.node_id)
        instances[step.name] = ids

    edges: list[tuple[str, str]] = []
    for step in spec.steps:
        for dep in step.depends:
            fan_in = dep.endswith("_*")
            base = dep[:-2] if fan_in else dep
            for i, dst in enumerate(instances[step.name]):
                if fan_in:
                    edges.extend((src, dst) for src in instances[base])
                elif len(instances[base]) == 1:
                    edges.append((instances[base][0], dst))
                else:
                    edges.append((instances[base][i], dst))

    incoming = {dst for _, dst in edges}
    roots = [n.node_id for n in nodes if n.node_id not in incoming]
    return ExpandedDag(nodes=nodes, edges=edges, root_ids=roots)


def ready_frontier(dag: ExpandedDag, completed: set[str]) -> set[str]:
    """Incomplete nodes whose predecessors are all completed."""
    known = {n.node_id for n in dag.nodes}
    unknown = completed - known
    if unknown:
        raise ValueError(f"unknown node ids in completed set: {sorted(unknown)}")
    return {
        n.node_id
        for n in dag.nodes
        if n.node_id not in completed and dag.predecessors(n.node_id) <= completed
    }


def topological_order(dag: ExpandedDag) -> list[str]:
    """Node ids in an order compatible with the edges; raises on cycles."""
    order: list[str] = []
    done: set[str] = set()
    while len(done) < len(dag.nodes):
        frontier = ready_frontier(dag, done)
        if not frontier:
            raise ExpansionError("expanded graph contains a cycle")
        batch = sorted(frontier)
        order.extend(batch)
        done.update(batch)
    return order
