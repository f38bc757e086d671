"""Queued unit of work and its canonical JSON form.

The wire schema is fixed: ``{"v":1,"task_id":str,"kind":"generation"|
"real"|"step_once","study_id":str,"priority":int,"node_id":str,
"range":[lo,hi]|null,"sample":int|null,"retries":int,"payload":object}``.
Canonical JSON means sorted keys, UTF-8, and no insignificant whitespace,
so envelope bytes hash identically everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import CorruptEnvelopeError

ENVELOPE_VERSION = 1

KIND_GENERATION = "generation"
KIND_REAL = "real"
KIND_STEP_ONCE = "step_once"
KINDS = (KIND_GENERATION, KIND_REAL, KIND_STEP_ONCE)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class TaskEnvelope:
    """One queued task: generation fan-out, a real sample, or a once step."""

    task_id: str
    kind: str
    study_id: str
    priority: int
    node_id: str
    range: tuple[int, int] | None = None
    sample: int | None = None
    retries: int = 0
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "v": ENVELOPE_VERSION,
            "task_id": self.task_id,
            "kind": self.kind,
            "study_id": self.study_id,
            "priority": self.priority,
            "node_id": self.node_id,
            "range": list(self.range) if self.range is not None else None,
            "sample": self.sample,
            "retries": self.retries,
            "payload": self.payload,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def encoded_size(self) -> int:
        return len(self.to_json().encode("utf-8"))

    def sample_width(self) -> int:
        """How many sample executions this envelope represents when acked."""
        if self.kind == KIND_GENERATION:
            return 0
        if self.range is not None:
            return self.range[1] - self.range[0]
        return 1

    def sample_indices(self) -> list[int]:
        if self.range is not None:
            return list(range(self.range[0], self.range[1]))
        if self.sample is not None:
            return [self.sample]
        return []

    @classmethod
    def from_dict(cls, data) -> "TaskEnvelope":
        if not isinstance(data, dict):
            raise CorruptEnvelopeError("envelope must be a JSON object")
        if data.get("v") != ENVELOPE_VERSION:
            raise CorruptEnvelopeError(f"unsupported envelope version {data.get('v')!r}")
        missing = {
            "task_id", "kind", "study_id", "priority", "node_id",
            "range", "sample", "retries", "payload",
        } - set(data)
        if missing:
            raise CorruptEnvelopeError(f"envelope missing fields: {sorted(missing)}")
        kind = data["kind"]
        if kind not in KINDS:
            raise CorruptEnvelopeError(f"unknown envelope kind {kind!r}")
        rng = data["range"]
        if rng is not None:
            if (
                not isinstance(rng, (list, tuple))
                or len(rng) != 2
                or not all(isinstance(x, int) for x in rng)
                or rng[0] > rng[1]
            ):
                raise CorruptEnvelopeError(f"bad range {rng!r}")
            rng = (rng[0], rng[1])
        sample = data["sample"]
        if sample is not None and not isinstance(sample, int):
            raise CorruptEnvelopeError(f"bad sample index {sample!r}")
        for int_field in ("priority", "retries"):
            if not isinstance(data[int_field], int):
                raise CorruptEnvelopeError(f"{int_field} must be an integer")
        if not isinstance(data["payload"], dict):
            raise CorruptEnvelopeError("payload must be an object")
        for str_field in ("task_id", "study_id", "node_id"):
            if not isinstance(data[str_field], str) or not data[str_field]:
                raise CorruptEnvelopeError(f"{str_field} must be a non-empty string")
        return cls(
            task_id=data["task_id"],
            kind=kind,
            study_id=data["study_id"],
            priority=data["priority"],
            node_id=data["node_id"],
            range=rng,
            sample=sample,
            retries=data["retries"],
            payload=data["payload"],
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "TaskEnvelope":
        try:
            data = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptEnvelopeError(f"envelope is not valid JSON: {exc}") from None
        return cls.from_dict(data)
