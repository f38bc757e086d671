"""ensembleq: a producer-consumer workflow engine for large simulation ensembles.

A study file declares shell-command steps, parameter combinations, and a
(potentially huge) sample table. Enqueuing a study posts a handful of
metadata-only root tasks; decoupled workers recursively fan the hierarchy
out into real per-sample tasks, execute them in unique workspaces, and
drive dependency progression through a priority broker with at-least-once
delivery.
"""

__version__ = "0.1.0"

from .dag import ExpandedDag, StepInstance, expand, ready_frontier
from .errors import EnsembleError
from .hierarchy import HierarchyPlan, enqueue_study, expand_generation_task, plan_hierarchy
from .samples import SampleSet, generate_samples, sample_bindings
from .specfile import WorkflowSpec, parse_spec, parse_spec_file
from .subst import substitute

__all__ = [
    "EnsembleError",
    "ExpandedDag",
    "HierarchyPlan",
    "SampleSet",
    "StepInstance",
    "WorkflowSpec",
    "__version__",
    "enqueue_study",
    "expand",
    "expand_generation_task",
    "generate_samples",
    "parse_spec",
    "parse_spec_file",
    "plan_hierarchy",
    "ready_frontier",
    "sample_bindings",
    "substitute",
]
