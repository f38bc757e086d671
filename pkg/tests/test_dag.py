"""Step graph expansion and frontier computation."""

from __future__ import annotations

import random

import pytest

from ensembleq.dag import ExpandedDag, expand, ready_frontier, topological_order
from ensembleq.errors import ExpansionError
from ensembleq.specfile import parse_spec
from ensembleq.subst import find_tokens


def _spec(text: str):
    return parse_spec(text)


FAN_IN = """\
study:
  - name: sim
    run: echo $(ITER) $(SAMPLE_ID)
  - name: collect
    depends: [sim_*]
    mode: once
    run: echo done
parameters:
  ITER:
    values: [1, 2, 3]
    label: "ITER.%%"
"""


def test_fan_in_collapses_to_single_collect_node():
    dag = expand(_spec(FAN_IN))
    sims = [n for n in dag.nodes if n.step == "sim"]
    collects = [n for n in dag.nodes if n.step == "collect"]
    assert len(sims) == 3
    assert len(collects) == 1
    assert len(dag.edges) == 3
    assert {e[1] for e in dag.edges} == {collects[0].node_id}
    assert sorted(dag.root_ids) == sorted(n.node_id for n in sims)


def test_single_step_no_parameters():
    dag = expand(_spec("study:\n  - name: a\n    run: echo hi\n"))
    assert len(dag.nodes) == 1
    assert dag.edges == []
    assert dag.root_ids == [dag.nodes[0].node_id]
    assert dag.nodes[0].workspace_path == "a"
    assert dag.nodes[0].parameter_label == ""


CHAIN3 = """\
study:
  - name: a
    run: echo $(P) $(SAMPLE_ID)
  - name: b
    depends: [a]
    run: echo $(SAMPLE_ID)
  - name: c
    depends: [b]
    run: echo $(SAMPLE_ID)
parameters:
  P:
    values: [u, v]
    label: "P.%%"
"""


def _brute_force_expand(spec):
    """Independent oracle: materialize steps x combinations, then filter.

    A step keeps all K copies iff its command mentions a parameter or it
    (transitively) plain-depends on a step that does; otherwise only copy
    0 survives. Edges connect matching indices (plain) or all indices
    (fan-in), deduplicated against surviving nodes.
    """
    k = spec.parameters.combination_count()
    params = set(spec.parameters.entries)
    uses = {}
    for step in spec.steps:
        uses[step.name] = bool(params & set(find_tokens(step.command)))
    for _ in spec.steps:
        for step in spec.steps:
            for dep in step.depends:
                if not dep.endswith("_*") and uses[dep]:
                    uses[step.name] = True
    nodes = set()
    for step in spec.steps:
        copies = range(k) if uses[step.name] else [0]
        nodes.update((step.name, i) for i in copies)
    edges = set()
    for step in spec.steps:
        for dep in step.depends:
            base = dep[:-2] if dep.endswith("_*") else dep
            for (s, i) in sorted(nodes):
                if s != step.name:
                    continue
                for (d, j) in sorted(nodes):
                    if d != base:
                        continue
                    if dep.endswith("_*") or j == i or not uses[base]:
                        edges.add(((d, j), (s, i)))
    return nodes, edges


def test_chain_expansion_matches_brute_force():
    spec = _spec(CHAIN3)
    dag = expand(spec)
    assert len(dag.nodes) == 6
    assert len(dag.edges) == 4

    nodes, edges = _brute_force_expand(spec)
    got_nodes = {(n.step, n.parameter_index) for n in dag.nodes}
    got_edges = {
        (
            (dag.node(src).step, dag.node(src).parameter_index),
            (dag.node(dst).step, dag.node(dst).parameter_index),
        )
        for src, dst in dag.edges
    }
    assert got_nodes == nodes
    assert got_edges == edges


def test_fan_in_expansion_matches_brute_force():
    spec = _spec(FAN_IN)
    dag = expand(spec)
    nodes, edges = _brute_force_expand(spec)
    assert {(n.step, n.parameter_index) for n in dag.nodes} == nodes
    assert len(dag.edges) == len(edges)


def test_parameter_tokens_resolved_in_commands():
    dag = expand(_spec(CHAIN3))
    a0 = dag.node("a@0")
    assert "$(P)" not in a0.resolved_command
    assert "u" in a0.resolved_command
    assert "$(SAMPLE_ID)" in a0.resolved_command
    assert a0.workspace_path == "a/P.u"
    assert a0.parameter_label == "P.u"


def test_label_values_sanitized():
    spec = _spec(
        "study:\n  - name: a\n    run: echo $(P)\n"
        "parameters:\n  P:\n    values: [\"x/y z\"]\n    label: \"P.%%\"\n"
    )
    dag = expand(spec)
    assert dag.nodes[0].parameter_label == "P.x_y_z"


def _chain_dag() -> ExpandedDag:
    return expand(_spec(
        "study:\n"
        "  - name: a\n    run: echo 1\n"
        "  - name: b\n    depends: [a]\n    run: echo 2\n"
        "  - name: c\n    depends: [b]\n    run: echo 3\n"
    ))


def test_frontier_roots_only():
    dag = _chain_dag()
    assert ready_frontier(dag, set()) == {"a@0"}


def test_frontier_chain_advance():
    dag = _chain_dag()
    assert ready_frontier(dag, {"a@0"}) == {"b@0"}


DIAMOND = """\
study:
  - name: a
    run: echo a
  - name: b
    depends: [a]
    run: echo b
  - name: c
    depends: [a]
    run: echo c
  - name: d
    depends: [b, c]
    run: echo d
"""


def test_frontier_diamond_matches_predecessor_scan():
    dag = expand(_spec(DIAMOND))
    completed = {"a@0", "b@0"}
    got = ready_frontier(dag, completed)
    # Brute-force oracle over all nodes.
    expected = set()
    for node in dag.nodes:
        if node.node_id in completed:
            continue
        preds = {src for src, dst in dag.edges if dst == node.node_id}
        if preds <= completed:
            expected.add(node.node_id)
    assert got == expected == {"c@0"}


def test_frontier_rejects_unknown_ids():
    dag = _chain_dag()
    with pytest.raises(ValueError):
        ready_frontier(dag, {"nope@0"})


def test_frontier_cycles_visit_each_node_once_in_dependency_order():
    spec = _spec(CHAIN3)
    dag = expand(spec)
    seen: list[str] = []
    completed: set[str] = set()
    rng = random.Random(5)
    while len(completed) < len(dag.nodes):
        frontier = ready_frontier(dag, completed)
        assert frontier, "stuck before visiting every node"
        pick = rng.choice(sorted(frontier))
        for src, dst in dag.edges:
            if dst == pick:
                assert src in completed
        seen.append(pick)
        completed.add(pick)
    assert len(seen) == len(set(seen)) == len(dag.nodes)
    assert ready_frontier(dag, completed) == set()


def test_topological_order_exists():
    order = topological_order(expand(_spec(DIAMOND)))
    assert order.index("a@0") < order.index("b@0") < order.index("d@0")


def test_expansion_deterministic():
    a = expand(_spec(CHAIN3))
    b = expand(_spec(CHAIN3))
    assert [n.node_id for n in a.nodes] == [n.node_id for n in b.nodes]
    assert a.edges == b.edges


def test_star_dependency_on_unknown_step_is_expansion_error():
    spec = _spec(FAN_IN)
    spec.steps[1].depends = ["ghost_*"]
    with pytest.raises(ExpansionError, match="ghost"):
        expand(spec)
