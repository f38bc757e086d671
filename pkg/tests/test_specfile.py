"""Workflow file parsing, validation, and canonical round-trips."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensembleq.errors import SpecSyntaxError, ValidationError
from ensembleq.specfile import (
    DEFAULT_BRANCHING,
    DEFAULT_MAX_RETRIES,
    DEFAULT_MESSAGE_LIMIT,
    canonical_spec_text,
    parse_spec,
)

MINIMAL = """\
description: two step demo
study:
  - name: sim
    run: |
      echo sample $(SAMPLE_ID) at $(ITER)
  - name: collect
    depends: [sim_*]
    mode: once
    run: echo done
parameters:
  ITER:
    values: [1, 2]
    label: "ITER.%%"
samples:
  count: 4
  columns: [x]
  branching: 3
"""


def test_minimal_spec_parses():
    spec = parse_spec(MINIMAL)
    assert [s.name for s in spec.steps] == ["sim", "collect"]
    assert spec.parameters.combination_count() == 2
    assert spec.parameters.entries["ITER"].values == ["1", "2"]
    assert spec.sample_config.count == 4
    assert spec.sample_config.branching_factor == 3


def test_defaults_applied():
    spec = parse_spec("study:\n  - name: a\n    run: echo hi\n")
    step = spec.steps[0]
    assert step.shell == "/bin/sh"
    assert step.run_mode == "per_sample"
    assert step.max_retries == DEFAULT_MAX_RETRIES
    assert step.command == "echo hi\n"
    assert spec.sample_config.branching_factor == DEFAULT_BRANCHING
    assert spec.run_config.task_priority_real == 10
    assert spec.run_config.task_priority_generation == 1
    assert spec.run_config.message_size_limit == DEFAULT_MESSAGE_LIMIT
    assert spec.run_config.broker_endpoint == "local:"


def test_dangling_dependency_names_the_step():
    text = MINIMAL.replace("depends: [sim_*]", "depends: [sym]")
    with pytest.raises(ValidationError, match="sym"):
        parse_spec(text)


def test_ragged_parameters_rejected():
    text = MINIMAL.replace(
        'label: "ITER.%%"',
        'label: "ITER.%%"\n  RATE:\n    values: [0.1, 0.2, 0.3]\n    label: "RATE.%%"',
    )
    with pytest.raises(ValidationError, match="ragged parameters"):
        parse_spec(text)


def test_cycle_rejected():
    text = """\
study:
  - name: a
    depends: [b]
    run: echo a
  - name: b
    depends: [a]
    run: echo b
"""
    with pytest.raises(ValidationError, match="cycle"):
        parse_spec(text)


def test_duplicate_step_name_rejected():
    text = "study:\n  - name: a\n    run: echo 1\n  - name: a\n    run: echo 2\n"
    with pytest.raises(ValidationError, match="duplicate step name"):
        parse_spec(text)


def test_once_step_may_not_use_sample_tokens():
    text = """\
study:
  - name: a
    mode: once
    run: echo $(SAMPLE_ID)
"""
    with pytest.raises(ValidationError, match="SAMPLE_ID"):
        parse_spec(text)


def test_priority_ordering_enforced():
    text = MINIMAL + "run:\n  priority_real: 1\n  priority_generation: 5\n"
    with pytest.raises(ValidationError, match="priority"):
        parse_spec(text)


def test_branching_below_two_rejected():
    text = MINIMAL.replace("branching: 3", "branching: 1")
    with pytest.raises(ValidationError, match="branching"):
        parse_spec(text)


def test_label_needs_exactly_one_placeholder():
    text = MINIMAL.replace('label: "ITER.%%"', 'label: "ITER"')
    with pytest.raises(ValidationError, match="%%"):
        parse_spec(text)


def test_syntax_error_carries_line_number():
    text = "study:\n  - name: a\n    run: echo hi\n   badline\n"
    with pytest.raises(SpecSyntaxError) as err:
        parse_spec(text)
    assert err.value.line == 4
    assert "line 4" in str(err.value)


def test_tab_indentation_rejected():
    with pytest.raises(SpecSyntaxError, match="tab"):
        parse_spec("study:\n\t- name: a\n")


def test_duplicate_key_rejected():
    with pytest.raises(SpecSyntaxError, match="duplicate key"):
        parse_spec("description: one\ndescription: two\nstudy:\n  - name: a\n    run: x\n")


def test_unknown_top_level_key_rejected():
    with pytest.raises(ValidationError, match="studyy"):
        parse_spec("studyy:\n  - name: a\n    run: x\n")


def test_block_literal_preserves_hash_and_blank_lines():
    text = """\
study:
  - name: a
    run: |
      echo start
      # this is a shell comment, not a file comment

      echo end
"""
    spec = parse_spec(text)
    assert spec.steps[0].command == "echo start\n# this is a shell comment, not a file comment\n\necho end\n"


def test_quoted_scalars_and_env():
    text = """\
description: "a \\"quoted\\" description"
env:
  ITER: "1"
  GREETING: hello world
study:
  - name: a
    run: echo $(GREETING)
"""
    spec = parse_spec(text)
    assert spec.description == 'a "quoted" description'
    assert spec.env_vars == {"ITER": "1", "GREETING": "hello world"}


def test_parse_is_deterministic():
    assert parse_spec(MINIMAL) == parse_spec(MINIMAL)


def test_canonical_round_trip():
    spec = parse_spec(MINIMAL)
    text = canonical_spec_text(spec)
    again = parse_spec(text)
    assert again == spec
    # A second round trip is byte-stable.
    assert canonical_spec_text(again) == text


def test_canonical_round_trip_with_env_and_file_source():
    text = """\
description: file-driven
env:
  ITER: "3"
study:
  - name: a
    shell: /bin/bash
    retries: 0
    run: |
      echo "$(SAMPLE.x)" > out.txt
samples:
  count: 5
  columns: [x, y]
  source:
    generator:
      kind: file
      path: designs/table.csv
  branching: 7
run:
  broker: 127.0.0.1:7777
  workspace: /tmp/studies
  priority_real: 20
  priority_generation: 2
  message_limit: 1024
"""
    spec = parse_spec(text)
    assert spec.sample_config.kind == "file"
    assert spec.sample_config.path == "designs/table.csv"
    assert parse_spec(canonical_spec_text(spec)) == spec


def test_reserved_names_cannot_be_redefined():
    with pytest.raises(ValidationError, match="reserved"):
        parse_spec("env:\n  WORKSPACE: /tmp\nstudy:\n  - name: a\n    run: x\n")


def test_env_and_parameter_name_clash_rejected():
    text = """\
env:
  ITER: "1"
study:
  - name: a
    run: echo $(ITER)
parameters:
  ITER:
    values: [1]
    label: "ITER.%%"
"""
    with pytest.raises(ValidationError, match="ITER"):
        parse_spec(text)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=9), st.integers(min_value=0, max_value=5))
def test_commands_normalize_to_single_trailing_newline(lines, pad):
    body = "\n".join(f"echo line{i}" for i in range(lines + 1)) + "\n" * pad
    text = "study:\n  - name: a\n    run: |\n" + "".join(
        f"      {ln}\n" for ln in body.split("\n") if ln
    )
    spec = parse_spec(text)
    assert spec.steps[0].command.endswith("\n")
    assert not spec.steps[0].command.endswith("\n\n")
