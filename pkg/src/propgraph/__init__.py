"""Ontology-free document knowledge graphs built from proposition quadruplets.

The package covers KG synthesis (chunking, decontextualization, entity and
relation extraction, or a single whole-document call), persistence with exact
vector search, proposition-entity graph retrieval, and coverage / retrieval /
QA evaluation. All model calls go through :mod:`propgraph.client`.
"""

from .model import (
    Chunk,
    Document,
    EntityNode,
    GroundTruthTriplet,
    KnowledgeGraph,
    Proposition,
    Quadruplet,
)

__all__ = [
    "Chunk",
    "Document",
    "EntityNode",
    "GroundTruthTriplet",
    "KnowledgeGraph",
    "Proposition",
    "Quadruplet",
]

__version__ = "0.1.0"
