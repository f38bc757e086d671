"""Study provenance: the on-disk record that lets any worker (or a later
resubmission pass) reconstruct a study from its workspace alone.

Layout under the workspace root::

    <workspace>/<study_id>/
        study.json        # spec text, graph nodes/edges, sample counts
        samples.csv       # the full sample table (header + N rows)
        <step>/<param_label>/<zero-padded sample>/   # task workspaces
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass

from .dag import ExpandedDag, expand
from .envelope import canonical_json
from .errors import UnknownStudyError
from .samples import SampleSet, load_samples_csv
from .specfile import WorkflowSpec, parse_spec

STUDY_FILENAME = "study.json"
SAMPLES_FILENAME = "samples.csv"
DONE_FILENAME = ".done"
PROVENANCE_VERSION = 1


def study_root_for(workspace_root: str, study_id: str) -> str:
    return os.path.join(os.path.abspath(workspace_root), study_id)


def pad_width(n: int) -> int:
    """Digits needed so zero-padded sample directories sort numerically."""
    return max(1, len(str(max(n - 1, 0))))


def write_study_provenance(
    root: str,
    *,
    study_id: str,
    spec: WorkflowSpec,
    dag: ExpandedDag,
    n: int,
    spec_text: str | None = None,
) -> None:
    """Write study.json (canonical JSON, atomic rename)."""
    from .specfile import canonical_spec_text

    doc = {
        "v": PROVENANCE_VERSION,
        "study_id": study_id,
        "created": time.time(),
        "n": n,
        "b": spec.sample_config.branching_factor,
        "k": spec.parameters.combination_count(),
        "spec_root": os.path.abspath(os.path.dirname(spec.source_path))
        if spec.source_path
        else os.getcwd(),
        "spec_text": spec_text if spec_text is not None else canonical_spec_text(spec),
        "nodes": [
            {
                "node_id": node.node_id,
                "step": node.step,
                "parameter_index": node.parameter_index,
                "parameter_label": node.parameter_label,
                "workspace_path": node.workspace_path,
                "sample_scoped": node.sample_scoped,
            }
            for node in dag.nodes
        ],
        "edges": [list(e) for e in dag.edges],
    }
    path = os.path.join(root, STUDY_FILENAME)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(doc))
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class StudyContext:
    """Everything a worker needs to execute tasks of one study."""

    study_id: str
    root: str
    spec: WorkflowSpec
    dag: ExpandedDag
    samples: SampleSet
    n: int
    b: int
    spec_root: str

    def node(self, node_id: str):
        return self.dag.node(node_id)

    def expected_samples(self, node_id: str) -> int:
        """Successful sample executions required to complete a node."""
        return self.n if self.dag.node(node_id).sample_scoped else 1

    def pad(self, index: int) -> str:
        return str(index).zfill(pad_width(self.n))

    def node_workspace(self, node_id: str) -> str:
        return os.path.join(self.root, self.dag.node(node_id).workspace_path)

    def task_workspace(self, node_id: str, sample: int | None) -> str:
        base = self.node_workspace(node_id)
        if sample is None:
            return base
        return os.path.join(base, self.pad(sample))

    def step_root(self, step_name: str) -> str:
        return os.path.join(self.root, step_name)


def load_study(root: str) -> StudyContext:
    """Rebuild a StudyContext from a study directory."""
    path = os.path.join(root, STUDY_FILENAME)
    if not os.path.isfile(path):
        raise UnknownStudyError(f"no {STUDY_FILENAME} under {root}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("v") != PROVENANCE_VERSION:
        raise UnknownStudyError(f"unsupported provenance version in {path}")
    spec = parse_spec(doc["spec_text"])
    dag = expand(spec)
    stored = [n["node_id"] for n in doc["nodes"]]
    rebuilt = [n.node_id for n in dag.nodes]
    if stored != rebuilt:
        raise UnknownStudyError(
            f"{path} does not match its spec expansion (nodes differ)"
        )
    samples_path = os.path.join(root, SAMPLES_FILENAME)
    samples = load_samples_csv(samples_path) if os.path.isfile(samples_path) else SampleSet()
    return StudyContext(
        study_id=doc["study_id"],
        root=os.path.abspath(root),
        spec=spec,
        dag=dag,
        samples=samples,
        n=doc["n"],
        b=doc["b"],
        spec_root=doc.get("spec_root", os.path.abspath(root)),
    )


class StudyCache:
    """Thread-safe cache of StudyContext objects keyed by study root."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._by_root: dict[str, StudyContext] = {}

    def get(self, root: str) -> StudyContext:
        key = os.path.abspath(root)
        with self._lock:
            ctx = self._by_root.get(key)
        if ctx is not None:
            return ctx
        ctx = load_study(key)
        with self._lock:
            self._by_root.setdefault(key, ctx)
        return ctx
