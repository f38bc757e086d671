"""Hierarchical task generation: plans, expansion, and study enqueue."""

from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensembleq.broker import Broker
from ensembleq.dag import expand
from ensembleq.envelope import KIND_GENERATION, KIND_REAL, KIND_STEP_ONCE, TaskEnvelope
from ensembleq.errors import ConfigError, CorruptEnvelopeError, MessageTooLargeError
from ensembleq.hierarchy import (
    enqueue_study,
    expand_generation_task,
    generation_task_count,
    make_payload,
    plan_hierarchy,
    root_envelope,
    task_id_for,
)
from ensembleq.samples import generate_samples
from ensembleq.specfile import parse_spec


def _gen_envelope(n: int, b: int, lo: int = 0, hi: int | None = None) -> TaskEnvelope:
    hi = n if hi is None else hi
    return TaskEnvelope(
        task_id=task_id_for("study0", "sim@0", "g", lo, hi),
        kind=KIND_GENERATION,
        study_id="study0",
        priority=1,
        node_id="sim@0",
        range=(lo, hi),
        retries=3,
        payload=make_payload("/tmp/study0", n, b, 10, 3),
    )


def _drain(n: int, b: int, bundle_size: int = 1):
    """Recursively expand a root; returns (generation envs, real envs, depth)."""
    plan = plan_hierarchy(n, b)
    root = _gen_envelope(n, b)
    gens, reals = [root], []
    stack = [(root, 1)]
    max_levels = 1
    while stack:
        env, level = stack.pop()
        max_levels = max(max_levels, level)
        for child in expand_generation_task(env, plan, bundle_size=bundle_size):
            if child.kind == KIND_GENERATION:
                gens.append(child)
                stack.append((child, level + 1))
            else:
                reals.append(child)
    return gens, reals, max_levels


# ---------------------------------------------------------------------------
# plans


def test_plan_nine_by_three_matches_reference_hierarchy():
    plan = plan_hierarchy(9, 3)
    assert plan.depth == 2
    assert plan.root_range() == (0, 9)
    assert plan.split_range(0, 9) == [(0, 3), (3, 6), (6, 9)]
    gens, reals, levels = _drain(9, 3)
    assert len(gens) == 4
    assert len(reals) == 9
    assert len(gens) + len(reals) == 13
    assert levels == 2


def test_plan_single_sample():
    plan = plan_hierarchy(1, 3)
    assert plan.depth == 1
    gens, reals, _ = _drain(1, 3)
    assert len(gens) == 1  # the root always exists
    assert len(reals) == 1
    assert len(gens) + len(reals) == 2


def test_plan_27_by_3_counts():
    # Oracle: brute-force recursive expansion.
    gens, reals, levels = _drain(27, 3)
    assert plan_hierarchy(27, 3).depth == 3
    assert levels == 3
    assert len(gens) == 1 + 3 + 9 == 13
    assert len(reals) == 27
    assert len(gens) + len(reals) == 40
    assert generation_task_count(27, 3) == 13


def test_split_ten_by_three_near_equal():
    # ceil(10 / ceil(10/3)) = 3 children; near-equal widths differ by <= 1.
    plan = plan_hierarchy(10, 3)
    children = plan.split_range(0, 10)
    assert len(children) == 3
    widths = [hi - lo for lo, hi in children]
    assert widths == [4, 3, 3]
    assert max(widths) - min(widths) <= 1
    # Cross-check: recursive expansion yields exactly 10 unique real tasks.
    _, reals, _ = _drain(10, 3)
    assert sorted(r.sample for r in reals) == list(range(10))


def test_plan_zero_samples():
    plan = plan_hierarchy(0, 5)
    assert plan.depth == 1
    gens, reals, _ = _drain(0, 5)
    assert len(gens) == 1
    assert reals == []


def test_branching_below_two_rejected():
    with pytest.raises(ConfigError):
        plan_hierarchy(4, 1)
    with pytest.raises(ConfigError):
        plan_hierarchy(-1, 3)


@settings(max_examples=80, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=2000),
    b=st.integers(min_value=2, max_value=64),
)
def test_coverage_uniqueness_and_counts(n, b):
    gens, reals, levels = _drain(n, b)
    indices = Counter(r.sample for r in reals)
    assert indices == Counter(range(n))  # each sample exactly once
    assert levels == plan_hierarchy(n, b).depth
    assert len(gens) == generation_task_count(n, b)
    assert len(gens) <= max(1, 2 * n - 1)
    # Messages for one root = generation count + N.
    assert len(gens) + len(reals) == generation_task_count(n, b) + n
    # Children per split never exceed b, widths near-equal.
    plan = plan_hierarchy(n, b)
    for env in gens:
        lo, hi = env.range
        if hi - lo > b:
            widths = [c_hi - c_lo for c_lo, c_hi in plan.split_range(lo, hi)]
            assert len(widths) <= b
            assert max(widths) - min(widths) <= 1


def test_priority_rule_real_above_generation():
    gens, reals, _ = _drain(50, 4)
    for g in gens:
        assert g.priority == 1
    for r in reals:
        assert r.priority == 10
    assert min(r.priority for r in reals) > max(g.priority for g in gens)


# ---------------------------------------------------------------------------
# expansion mechanics


def test_root_of_nine_splits_into_three_generation_envelopes():
    children = expand_generation_task(_gen_envelope(9, 3), plan_hierarchy(9, 3))
    assert [c.kind for c in children] == [KIND_GENERATION] * 3
    assert [c.range for c in children] == [(0, 3), (3, 6), (6, 9)]


def test_leaf_level_fanout_to_real_tasks():
    env = _gen_envelope(9, 3, lo=0, hi=3)
    children = expand_generation_task(env, plan_hierarchy(9, 3))
    assert [c.kind for c in children] == [KIND_REAL] * 3
    assert [c.sample for c in children] == [0, 1, 2]
    assert all(c.range is None for c in children)


def test_bundled_leaf_fanout():
    env = _gen_envelope(10, 10)
    children = expand_generation_task(env, plan_hierarchy(10, 10), bundle_size=4)
    assert [c.range or (c.sample, c.sample + 1) for c in children] == [
        (0, 4), (4, 8), (8, 10),
    ]
    assert all(c.kind == KIND_REAL for c in children)
    assert sum(c.sample_width() for c in children) == 10


def test_reexpansion_is_deterministic():
    first = expand_generation_task(_gen_envelope(9, 3), plan_hierarchy(9, 3))
    second = expand_generation_task(_gen_envelope(9, 3), plan_hierarchy(9, 3))
    assert [c.task_id for c in first] == [c.task_id for c in second]


def test_expand_rejects_non_generation():
    env = _gen_envelope(9, 3)
    env.kind = KIND_REAL
    with pytest.raises(CorruptEnvelopeError):
        expand_generation_task(env, plan_hierarchy(9, 3))


def test_expand_rejects_missing_payload():
    env = _gen_envelope(9, 3)
    env.payload = {}
    children = expand_generation_task(env, plan_hierarchy(9, 3))
    # Generation children are fine, but a leaf-level expansion needs payload.
    leaf = children[0]
    leaf.payload = {}
    with pytest.raises(CorruptEnvelopeError):
        expand_generation_task(leaf, plan_hierarchy(9, 3))


# ---------------------------------------------------------------------------
# envelope schema


def test_envelope_wire_schema():
    env = _gen_envelope(9, 3)
    data = json.loads(env.to_json())
    assert set(data) == {
        "v", "task_id", "kind", "study_id", "priority",
        "node_id", "range", "sample", "retries", "payload",
    }
    assert data["v"] == 1
    assert data["range"] == [0, 9]
    assert data["sample"] is None
    again = TaskEnvelope.from_json(env.to_json())
    assert again == env


def test_envelope_canonical_json_sorted_and_compact():
    env = _gen_envelope(2, 2)
    text = env.to_json()
    keys = [k for k in json.loads(text)]
    assert keys == sorted(keys)
    assert ": " not in text and ", " not in text


def test_envelope_rejects_bad_payloads():
    with pytest.raises(CorruptEnvelopeError):
        TaskEnvelope.from_json("not json")
    with pytest.raises(CorruptEnvelopeError):
        TaskEnvelope.from_dict({"v": 2})
    good = _gen_envelope(2, 2).to_dict()
    bad = dict(good, kind="bogus")
    with pytest.raises(CorruptEnvelopeError):
        TaskEnvelope.from_dict(bad)
    bad = dict(good, range=[3, 1])
    with pytest.raises(CorruptEnvelopeError):
        TaskEnvelope.from_dict(bad)


# ---------------------------------------------------------------------------
# study enqueue


STUDY = """\
study:
  - name: sim
    run: echo $(SAMPLE_ID)
samples:
  count: 1000
  columns: [x]
  branching: 10
run:
  workspace: {workspace}
"""


def test_enqueue_study_posts_single_root(tmp_path):
    spec = parse_spec(STUDY.format(workspace=json.dumps(str(tmp_path))))
    dag = expand(spec)
    samples = generate_samples(spec.sample_config)
    broker = Broker()
    study_id = enqueue_study(spec, dag, samples, broker)
    assert len(study_id) == 32
    stats = broker.stats()
    assert stats["counters"]["enqueued"] == 1
    assert stats["ready"] == 1
    root = tmp_path / study_id
    assert (root / "samples.csv").is_file()
    assert (root / "study.json").is_file()


def test_enqueue_study_zero_samples_once_step(tmp_path):
    text = (
        "study:\n  - name: package\n    mode: once\n    run: echo done\n"
        f"run:\n  workspace: {json.dumps(str(tmp_path))}\n"
    )
    spec = parse_spec(text)
    dag = expand(spec)
    samples = generate_samples(spec.sample_config)
    broker = Broker()
    enqueue_study(spec, dag, samples, broker)
    stats = broker.stats()
    assert stats["counters"]["enqueued"] == 1
    assert stats["kinds"][KIND_STEP_ONCE]["pending"] == 1


def test_enqueue_study_three_combinations(tmp_path):
    text = (
        "study:\n  - name: sim\n    run: echo $(P) $(SAMPLE_ID)\n"
        "parameters:\n  P:\n    values: [a, b, c]\n    label: \"P.%%\"\n"
        "samples:\n  count: 5\n  columns: [x]\n  branching: 2\n"
        f"run:\n  workspace: {json.dumps(str(tmp_path))}\n"
    )
    spec = parse_spec(text)
    broker = Broker()
    enqueue_study(spec, expand(spec), generate_samples(spec.sample_config), broker)
    stats = broker.stats()
    assert stats["counters"]["enqueued"] == 3
    assert stats["kinds"][KIND_GENERATION]["pending"] == 3


def test_enqueue_study_message_too_large(tmp_path):
    text = (
        "study:\n  - name: sim\n    run: echo $(SAMPLE_ID)\n"
        "samples:\n  count: 4\n  branching: 2\n"
        f"run:\n  workspace: {json.dumps(str(tmp_path))}\n  message_limit: 16\n"
    )
    spec = parse_spec(text)
    with pytest.raises(MessageTooLargeError):
        enqueue_study(spec, expand(spec), generate_samples(spec.sample_config), Broker())


def test_root_envelope_ids_differ_across_studies(tmp_path):
    spec = parse_spec(STUDY.format(workspace=json.dumps(str(tmp_path))))
    node = expand(spec).nodes[0]
    kw = dict(n=4, b=2, priority_real=10, priority_generation=1, retries=3, study_root="/s")
    a = root_envelope("study-a", node, **kw)
    b = root_envelope("study-b", node, **kw)
    assert a.task_id != b.task_id
    assert a.kind == KIND_GENERATION
