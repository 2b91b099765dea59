"""Attack-technique knowledge graphs from audit logs, script ASTs, and CTI
reports: per-source extraction, same-source aggregation, cross-source
unification, detection by graph alignment, and an evaluation harness."""

from .model import (
    EdgeRelation,
    KnowledgeEdge,
    KnowledgeNode,
    NodeKind,
    TechniqueGraph,
    canonical_form,
    canonically_equal,
    compute_levels,
    validate,
)
from .serialize import export_dot, export_gml, export_json, import_gml, import_json

__version__ = "0.1.0"

__all__ = [
    "EdgeRelation",
    "KnowledgeEdge",
    "KnowledgeNode",
    "NodeKind",
    "TechniqueGraph",
    "canonical_form",
    "canonically_equal",
    "compute_levels",
    "validate",
    "export_dot",
    "export_gml",
    "export_json",
    "import_gml",
    "import_json",
    "__version__",
]
