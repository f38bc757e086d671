"""Workflow file parsing, validation, and canonical serialization.

The on-disk format is a small YAML subset: mappings, block sequences,
one-line flow sequences of scalars, double-quoted scalars (JSON escaping)
and ``|`` block literals. Indentation is exactly two spaces per level and
tabs are rejected. Comment lines start with ``#``; there are no trailing
comments, so shell commands containing ``#`` survive unharmed. Anchors,
tags, and flow mappings are not part of the grammar.

Top-level keys: ``description``, ``env``, ``study``, ``parameters``,
``samples``, ``run``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import SpecSyntaxError, ValidationError
from .subst import find_tokens, substitute

IDENT_RE = re.compile(r"[A-Za-z0-9_]+\Z")
_KEY_RE = re.compile(r"([A-Za-z0-9_.]+):(?:[ \t]+(.*))?\Z")

PER_SAMPLE = "per_sample"
ONCE = "once"

DEFAULT_SHELL = "/bin/sh"
DEFAULT_MAX_RETRIES = 3
DEFAULT_BRANCHING = 25
DEFAULT_PRIORITY_REAL = 10
DEFAULT_PRIORITY_GENERATION = 1
DEFAULT_MESSAGE_LIMIT = 64 * 1024 * 1024
DEFAULT_BROKER = "local:"
DEFAULT_WORKSPACE = "./studies"

# Token names the engine binds itself; user-defined names may not shadow them.
RESERVED_TOKENS = ("WORKSPACE", "SAMPLE_ID", "SPEC_ROOT")


# ---------------------------------------------------------------------------
# domain types


@dataclass
class StepDefinition:
    """One workflow step: a shell command plus scheduling attributes."""

    name: str
    command: str
    shell: str = DEFAULT_SHELL
    depends: list[str] = field(default_factory=list)
    run_mode: str = PER_SAMPLE
    max_retries: int = DEFAULT_MAX_RETRIES

    def dependency_names(self) -> list[str]:
        """Dependency step names with any ``_*`` fan-in suffix stripped."""
        return [d[:-2] if d.endswith("_*") else d for d in self.depends]


@dataclass
class ParameterBlock:
    """Named value lists that zip columnwise into combinations."""

    entries: dict[str, "ParameterDef"] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    def combination_count(self) -> int:
        """Number of parameter combinations (1 when no parameters exist)."""
        if not self.entries:
            return 1
        return len(next(iter(self.entries.values())).values)


@dataclass
class ParameterDef:
    values: list[str]
    label: str


@dataclass
class SampleConfig:
    """How the per-combination sample table is produced."""

    count: int = 0
    column_names: list[str] = field(default_factory=list)
    kind: str = "uniform"
    seed: int = 0
    vmin: float = 0.0
    vmax: float = 1.0
    path: str | None = None
    branching_factor: int = DEFAULT_BRANCHING


@dataclass
class RunConfig:
    broker_endpoint: str = DEFAULT_BROKER
    workspace_root: str = DEFAULT_WORKSPACE
    task_priority_real: int = DEFAULT_PRIORITY_REAL
    task_priority_generation: int = DEFAULT_PRIORITY_GENERATION
    message_size_limit: int = DEFAULT_MESSAGE_LIMIT


@dataclass
class WorkflowSpec:
    """Parsed and validated workflow description."""

    description: str = ""
    env_vars: dict[str, str] = field(default_factory=dict)
    steps: list[StepDefinition] = field(default_factory=list)
    parameters: ParameterBlock = field(default_factory=ParameterBlock)
    sample_config: SampleConfig = field(default_factory=SampleConfig)
    run_config: RunConfig = field(default_factory=RunConfig)
    source_path: str | None = field(default=None, compare=False)

    def step(self, name: str) -> StepDefinition:
        for s in self.steps:
            if s.name == name:
                return s
        raise KeyError(name)


# ---------------------------------------------------------------------------
# tree parser (grammar level)


class _TreeParser:
    """Line-oriented recursive-descent parser for the YAML subset."""

    def __init__(self, text: str):
        self.lines = [ln.rstrip("\r") for ln in text.split("\n")]
        self.pos = 0

    # -- low-level helpers

    def _indent_of(self, raw: str, lineno: int) -> int:
        n = 0
        for ch in raw:
            if ch == " ":
                n += 1
            elif ch == "\t":
                raise SpecSyntaxError("tab characters are not allowed in indentation", lineno)
            else:
                break
        return n

    def _peek(self) -> tuple[int, int, str] | None:
        """Next significant line as (lineno, indent, content), or None."""
        i = self.pos
        while i < len(self.lines):
            raw = self.lines[i]
            lineno = i + 1
            if not raw.strip():
                i += 1
                continue
            indent = self._indent_of(raw, lineno)
            content = raw[indent:]
            if content.startswith("#"):
                i += 1
                continue
            return lineno, indent, content
        return None

    def _advance_to(self, lineno: int) -> None:
        self.pos = lineno

    # -- scalar forms

    def _scalar(self, token: str, lineno: int) -> str:
        token = token.strip()
        if token.startswith('"'):
            try:
                value = json.loads(token)
            except json.JSONDecodeError:
                raise SpecSyntaxError(f"bad quoted scalar {token!r}", lineno) from None
            if not isinstance(value, str):
                raise SpecSyntaxError(f"quoted scalar must be a string: {token!r}", lineno)
            return value
        return token

    def _flow_sequence(self, token: str, lineno: int) -> list[str]:
        body = token.strip()
        if not body.endswith("]"):
            raise SpecSyntaxError("flow sequence must close with ']' on the same line", lineno)
        inner = body[1:-1]
        items: list[str] = []
        depth_quote = False
        cur: list[str] = []
        i = 0
        while i < len(inner):
            ch = inner[i]
            if ch == '"':
                depth_quote = not depth_quote
                cur.append(ch)
            elif ch == "\\" and depth_quote and i + 1 < len(inner):
                cur.append(ch)
                cur.append(inner[i + 1])
                i += 1
            elif ch == "," and not depth_quote:
                items.append("".join(cur))
                cur = []
            elif ch == "[" and not depth_quote:
                raise SpecSyntaxError("nested flow sequences are not supported", lineno)
            else:
                cur.append(ch)
            i += 1
        if depth_quote:
            raise SpecSyntaxError("unterminated quote in flow sequence", lineno)
        if cur or items:
            items.append("".join(cur))
        out = []
        for item in items:
            if not item.strip():
                raise SpecSyntaxError("empty item in flow sequence", lineno)
            out.append(self._scalar(item, lineno))
        return out

    def _block_literal(self, key_indent: int, lineno: int) -> str:
        """Collect a ``|`` literal: lines indented past the key, clipped."""
        content_indent = key_indent + 2
        collected: list[str] = []
        i = self.pos
        while i < len(self.lines):
            raw = self.lines[i]
            if not raw.strip():
                collected.append("")
                i += 1
                continue
            indent = self._indent_of(raw, i + 1)
            if indent < content_indent:
                break
            collected.append(raw[content_indent:])
            i += 1
        self.pos = i
        while collected and collected[-1] == "":
            collected.pop()
        if not collected:
            return ""
        return "\n".join(collected) + "\n"

    # -- composite forms

    def _value_for(self, rest: str | None, indent: int, lineno: int):
        """Value following ``key:`` — scalar, flow seq, literal, or block."""
        if rest is not None and rest.strip():
            token = rest.strip()
            if token == "|":
                return self._block_literal(indent, lineno)
            if token.startswith("|"):
                raise SpecSyntaxError("content is not allowed after '|'", lineno)
            if token.startswith("["):
                return self._flow_sequence(token, lineno)
            return self._scalar(token, lineno)
        # Nested block (or empty value).
        nxt = self._peek()
        if nxt is None or nxt[1] <= indent:
            return ""
        _, child_indent, child_content = nxt
        if child_indent != indent + 2:
            raise SpecSyntaxError(
                f"expected indentation of {indent + 2} spaces", nxt[0]
            )
        if child_content.startswith("- ") or child_content == "-":
            return self._parse_sequence(child_indent)
        return self._parse_mapping(child_indent)

    def _parse_mapping(self, indent: int, first: tuple[str, object] | None = None) -> dict:
        result: dict[str, object] = {}
        if first is not None:
            result[first[0]] = first[1]
        while True:
            nxt = self._peek()
            if nxt is None:
                break
            lineno, line_indent, content = nxt
            if line_indent < indent:
                break
            if line_indent > indent:
                raise SpecSyntaxError("unexpected indentation", lineno)
            if content.startswith("- ") or content == "-":
                raise SpecSyntaxError("sequence item found where a key was expected", lineno)
            m = _KEY_RE.match(content)
            if not m:
                raise SpecSyntaxError(f"expected 'key: value', got {content!r}", lineno)
            key, rest = m.group(1), m.group(2)
            if key in result:
                raise SpecSyntaxError(f"duplicate key {key!r}", lineno)
            self._advance_to(lineno)
            result[key] = self._value_for(rest, indent, lineno)
        return result

    def _parse_sequence(self, indent: int) -> list:
        items: list[object] = []
        while True:
            nxt = self._peek()
            if nxt is None:
                break
            lineno, line_indent, content = nxt
            if line_indent != indent or not (content.startswith("- ") or content == "-"):
                if line_indent > indent:
                    raise SpecSyntaxError("unexpected indentation", lineno)
                break
            rest = content[2:] if content.startswith("- ") else ""
            if not rest.strip():
                raise SpecSyntaxError("expected a value after '-'", lineno)
            self._advance_to(lineno)
            m = _KEY_RE.match(rest.strip())
            if m:
                # Mapping item: first entry inline, siblings two deeper.
                key, val_rest = m.group(1), m.group(2)
                value = self._value_for(val_rest, indent + 2, lineno)
                items.append(self._parse_mapping(indent + 2, first=(key, value)))
            else:
                items.append(self._scalar(rest, lineno))
        return items

    def parse(self) -> dict:
        nxt = self._peek()
        if nxt is None:
            raise SpecSyntaxError("empty document", 1)
        if nxt[1] != 0:
            raise SpecSyntaxError("top-level content must not be indented", nxt[0])
        tree = self._parse_mapping(0)
        leftover = self._peek()
        if leftover is not None:
            raise SpecSyntaxError("content after end of document", leftover[0])
        return tree


# ---------------------------------------------------------------------------
# typed loading


def _want_mapping(value, what: str) -> dict:
    if not isinstance(value, dict):
        raise ValidationError(f"{what} must be a mapping")
    return value


def _want_sequence(value, what: str) -> list:
    if not isinstance(value, list):
        raise ValidationError(f"{what} must be a sequence")
    return value


def _want_scalar(value, what: str) -> str:
    if not isinstance(value, str):
        raise ValidationError(f"{what} must be a scalar")
    return value


def _as_int(value, what: str) -> int:
    text = _want_scalar(value, what)
    try:
        return int(text, 10)
    except ValueError:
        raise ValidationError(f"{what} must be an integer, got {text!r}") from None


def _as_float(value, what: str) -> float:
    text = _want_scalar(value, what)
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"{what} must be a number, got {text!r}") from None


def _check_known_keys(mapping: dict, allowed: set[str], what: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ValidationError(f"unknown key {key!r} in {what}")


def _load_step(item, index: int) -> StepDefinition:
    block = _want_mapping(item, f"study[{index}]")
    _check_known_keys(block, {"name", "run", "shell", "depends", "mode", "retries"}, f"study[{index}]")
    if "name" not in block:
        raise ValidationError(f"study[{index}] is missing required key 'name'")
    if "run" not in block:
        raise ValidationError(f"study[{index}] is missing required key 'run'")
    name = _want_scalar(block["name"], f"study[{index}].name")
    command = _want_scalar(block["run"], f"step {name!r} run")
    if command and not command.endswith("\n"):
        command += "\n"
    shell = _want_scalar(block.get("shell", DEFAULT_SHELL), f"step {name!r} shell")
    depends_raw = block.get("depends", [])
    depends = [
        _want_scalar(d, f"step {name!r} depends entry")
        for d in _want_sequence(depends_raw, f"step {name!r} depends")
    ]
    mode = _want_scalar(block.get("mode", PER_SAMPLE), f"step {name!r} mode")
    if mode not in (PER_SAMPLE, ONCE):
        raise ValidationError(f"step {name!r} mode must be '{PER_SAMPLE}' or '{ONCE}'")
    retries = _as_int(block.get("retries", str(DEFAULT_MAX_RETRIES)), f"step {name!r} retries")
    if retries < 0:
        raise ValidationError(f"step {name!r} retries must be >= 0")
    return StepDefinition(
        name=name,
        command=command,
        shell=shell,
        depends=depends,
        run_mode=mode,
        max_retries=retries,
    )


def _load_parameters(block) -> ParameterBlock:
    mapping = _want_mapping(block, "parameters")
    entries: dict[str, ParameterDef] = {}
    for name, body in mapping.items():
        if not IDENT_RE.match(name):
            raise ValidationError(f"parameter name {name!r} must match [A-Za-z0-9_]+")
        body = _want_mapping(body, f"parameter {name!r}")
        _check_known_keys(body, {"values", "label"}, f"parameter {name!r}")
        if "values" not in body:
            raise ValidationError(f"parameter {name!r} is missing 'values'")
        values = [
            _want_scalar(v, f"parameter {name!r} value")
            for v in _want_sequence(body["values"], f"parameter {name!r} values")
        ]
        if not values:
            raise ValidationError(f"parameter {name!r} has an empty value list")
        label = _want_scalar(body.get("label", f"{name}.%%"), f"parameter {name!r} label")
        entries[name] = ParameterDef(values=values, label=label)
    return ParameterBlock(entries=entries)


def _load_samples(block) -> SampleConfig:
    mapping = _want_mapping(block, "samples")
    _check_known_keys(mapping, {"count", "columns", "source", "branching"}, "samples")
    cfg = SampleConfig()
    if "count" in mapping:
        cfg.count = _as_int(mapping["count"], "samples.count")
    if "columns" in mapping:
        cfg.column_names = [
            _want_scalar(c, "samples.columns entry")
            for c in _want_sequence(mapping["columns"], "samples.columns")
        ]
    if "branching" in mapping:
        cfg.branching_factor = _as_int(mapping["branching"], "samples.branching")
    if "source" in mapping:
        source = _want_mapping(mapping["source"], "samples.source")
        _check_known_keys(source, {"generator"}, "samples.source")
        gen = _want_mapping(source.get("generator", {}), "samples.source.generator")
        _check_known_keys(gen, {"kind", "seed", "min", "max", "path"}, "samples.source.generator")
        if "kind" in gen:
            cfg.kind = _want_scalar(gen["kind"], "generator kind")
        if "seed" in gen:
            cfg.seed = _as_int(gen["seed"], "generator seed")
        if "min" in gen:
            cfg.vmin = _as_float(gen["min"], "generator min")
        if "max" in gen:
            cfg.vmax = _as_float(gen["max"], "generator max")
        if "path" in gen:
            cfg.path = _want_scalar(gen["path"], "generator path")
    return cfg


def _load_run(block) -> RunConfig:
    mapping = _want_mapping(block, "run")
    _check_known_keys(
        mapping,
        {"broker", "workspace", "priority_real", "priority_generation", "message_limit"},
        "run",
    )
    cfg = RunConfig()
    if "broker" in mapping:
        cfg.broker_endpoint = _want_scalar(mapping["broker"], "run.broker")
    if "workspace" in mapping:
        cfg.workspace_root = _want_scalar(mapping["workspace"], "run.workspace")
    if "priority_real" in mapping:
        cfg.task_priority_real = _as_int(mapping["priority_real"], "run.priority_real")
    if "priority_generation" in mapping:
        cfg.task_priority_generation = _as_int(mapping["priority_generation"], "run.priority_generation")
    if "message_limit" in mapping:
        cfg.message_size_limit = _as_int(mapping["message_limit"], "run.message_limit")
    return cfg


def parse_spec(text: str) -> WorkflowSpec:
    """Parse workflow file contents into a validated WorkflowSpec."""
    tree = _TreeParser(text).parse()
    _check_known_keys(
        tree, {"description", "env", "study", "parameters", "samples", "run"}, "document"
    )
    if "study" not in tree:
        raise ValidationError("document is missing the 'study' section")

    description = tree.get("description", "")
    if not isinstance(description, str):
        raise ValidationError("description must be a scalar or block literal")

    env_vars: dict[str, str] = {}
    if "env" in tree:
        for key, value in _want_mapping(tree["env"], "env").items():
            env_vars[key] = _want_scalar(value, f"env.{key}")

    steps = [
        _load_step(item, i)
        for i, item in enumerate(_want_sequence(tree["study"], "study"))
    ]
    parameters = _load_parameters(tree["parameters"]) if "parameters" in tree else ParameterBlock()
    sample_config = _load_samples(tree["samples"]) if "samples" in tree else SampleConfig()
    run_config = _load_run(tree["run"]) if "run" in tree else RunConfig()

    spec = WorkflowSpec(
        description=description,
        env_vars=env_vars,
        steps=steps,
        parameters=parameters,
        sample_config=sample_config,
        run_config=run_config,
    )
    validate_spec(spec)
    return spec


def parse_spec_file(path: str) -> WorkflowSpec:
    """Parse a workflow file from disk, recording its location."""
    with open(path, "r", encoding="utf-8") as fh:
        spec = parse_spec(fh.read())
    spec.source_path = path
    return spec


# ---------------------------------------------------------------------------
# validation


def _sample_tokens(command: str) -> list[str]:
    return [
        t for t in find_tokens(command)
        if t == "SAMPLE_ID" or t.startswith("SAMPLE.")
    ]


def validate_spec(spec: WorkflowSpec) -> None:
    """Check all workflow invariants; raise ValidationError on the first hit."""
    if not spec.steps:
        raise ValidationError("study must declare at least one step")

    seen: set[str] = set()
    for step in spec.steps:
        if not step.name or not IDENT_RE.match(step.name):
            raise ValidationError(f"step name {step.name!r} must match [A-Za-z0-9_]+")
        if step.name in seen:
            raise ValidationError(f"duplicate step name {step.name!r}")
        seen.add(step.name)
        if not step.command.strip():
            raise ValidationError(f"step {step.name!r} has an empty command")
        if step.run_mode == ONCE:
            bad = _sample_tokens(step.command)
            if bad:
                raise ValidationError(
                    f"step {step.name!r} runs once per parameter set but references "
                    f"sample token $({bad[0]})"
                )

    for step in spec.steps:
        for dep in step.dependency_names():
            if dep not in seen:
                raise ValidationError(
                    f"step {step.name!r} depends on undeclared step {dep!r}"
                )

    _check_acyclic(spec.steps)

    lengths = {name: len(p.values) for name, p in spec.parameters.entries.items()}
    if lengths and len(set(lengths.values())) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in lengths.items())
        raise ValidationError(f"ragged parameters (value lists differ in length: {detail})")
    for name, p in spec.parameters.entries.items():
        if p.label.count("%%") != 1:
            raise ValidationError(
                f"parameter {name!r} label must contain exactly one '%%' placeholder"
            )

    sc = spec.sample_config
    if sc.count < 0:
        raise ValidationError("samples.count must be >= 0")
    if sc.branching_factor < 2:
        raise ValidationError("samples.branching must be >= 2")
    if sc.kind not in ("uniform", "grid", "file"):
        raise ValidationError(f"unknown sample generator kind {sc.kind!r}")
    if sc.kind == "file" and not sc.path:
        raise ValidationError("file sample source requires a path")
    if len(set(sc.column_names)) != len(sc.column_names):
        raise ValidationError("sample column names must be unique")
    for col in sc.column_names:
        if not IDENT_RE.match(col):
            raise ValidationError(f"sample column name {col!r} must match [A-Za-z0-9_]+")

    rc = spec.run_config
    if rc.task_priority_real <= rc.task_priority_generation:
        raise ValidationError("run.priority_real must exceed run.priority_generation")
    if rc.message_size_limit <= 0:
        raise ValidationError("run.message_limit must be > 0")

    user_names = set(spec.env_vars) | set(spec.parameters.entries)
    for name in sorted(user_names):
        if name in RESERVED_TOKENS or name.startswith("SAMPLE."):
            raise ValidationError(f"name {name!r} shadows a reserved token")
    clash = set(spec.env_vars) & set(spec.parameters.entries)
    if clash:
        raise ValidationError(f"name {sorted(clash)[0]!r} is both an env var and a parameter")


def _check_acyclic(steps: list[StepDefinition]) -> None:
    preds = {s.name: set(s.dependency_names()) for s in steps}
    remaining = dict(preds)
    while remaining:
        roots = [n for n, ps in remaining.items() if not (ps & set(remaining))]
        if not roots:
            cycle = ", ".join(sorted(remaining))
            raise ValidationError(f"step dependencies contain a cycle among: {cycle}")
        for n in roots:
            del remaining[n]


# ---------------------------------------------------------------------------
# canonical serialization


def _q(value: str) -> str:
    return json.dumps(value, ensure_ascii=False)


def _emit_literal(out: list[str], key: str, text: str, indent: str) -> None:
    out.append(f"{indent}{key}: |")
    for line in text.rstrip("\n").split("\n"):
        out.append(f"{indent}  {line}" if line else "")


def canonical_spec_text(spec: WorkflowSpec) -> str:
    """Serialize a WorkflowSpec so that re-parsing yields an equal value."""
    out: list[str] = []
    out.append(f"description: {_q(spec.description)}")
    if spec.env_vars:
        out.append("env:")
        for key, value in spec.env_vars.items():
            out.append(f"  {key}: {_q(value)}")
    out.append("study:")
    for step in spec.steps:
        out.append(f"  - name: {step.name}")
        out.append(f"    shell: {_q(step.shell)}")
        out.append(f"    mode: {step.run_mode}")
        out.append(f"    retries: {step.max_retries}")
        if step.depends:
            out.append(f"    depends: [{', '.join(_q(d) for d in step.depends)}]")
        _emit_literal(out, "run", step.command, "    ")
    if spec.parameters.entries:
        out.append("parameters:")
        for name, p in spec.parameters.entries.items():
            out.append(f"  {name}:")
            out.append(f"    values: [{', '.join(_q(v) for v in p.values)}]")
            out.append(f"    label: {_q(p.label)}")
    sc = spec.sample_config
    out.append("samples:")
    out.append(f"  count: {sc.count}")
    if sc.column_names:
        out.append(f"  columns: [{', '.join(_q(c) for c in sc.column_names)}]")
    out.append("  source:")
    out.append("    generator:")
    out.append(f"      kind: {sc.kind}")
    out.append(f"      seed: {sc.seed}")
    out.append(f"      min: {sc.vmin!r}")
    out.append(f"      max: {sc.vmax!r}")
    if sc.path is not None:
        out.append(f"      path: {_q(sc.path)}")
    out.append(f"  branching: {sc.branching_factor}")
    rc = spec.run_config
    out.append("run:")
    out.append(f"  broker: {_q(rc.broker_endpoint)}")
    out.append(f"  workspace: {_q(rc.workspace_root)}")
    out.append(f"  priority_real: {rc.task_priority_real}")
    out.append(f"  priority_generation: {rc.task_priority_generation}")
    out.append(f"  message_limit: {rc.message_size_limit}")
    return "\n".join(out) + "\n"


def parameter_bindings(spec: WorkflowSpec, index: int) -> dict[str, str]:
    """Token bindings for parameter combination ``index``."""
    return {
        name: p.values[index] for name, p in spec.parameters.entries.items()
    }


def resolve_command(spec: WorkflowSpec, step: StepDefinition, index: int) -> str:
    """Substitute parameter tokens into a step command, leaving the rest."""
    return substitute(
        step.command,
        parameter_bindings(spec, index),
        partial=True,
        context=f"step {step.name}",
    )
