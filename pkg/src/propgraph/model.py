"""Domain types and the in-memory proposition-entity knowledge graph."""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .text import normalize_name, stable_id

NodeKind = Literal["entity", "proposition"]
UNKNOWN_TYPE = "unknown"


class GraphError(Exception):
    """Base class for knowledge-graph errors."""


class InvalidEntityError(GraphError):
    pass


class NodeNotFoundError(GraphError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class FrozenGraphError(GraphError):
    pass


class IntegrityError(GraphError):
    pass


def chunk_id_for(doc_id: str, index: int) -> str:
    return stable_id("c", doc_id, index)


def entity_id_for(normalized_name: str) -> str:
    return stable_id("e", normalized_name)


def proposition_id_for(chunk_id: str, ordinal: int) -> str:
    return stable_id("p", chunk_id, "prop", ordinal)


def quadruplet_id_for(chunk_id: str, ordinal: int) -> str:
    return stable_id("q", chunk_id, "quad", ordinal)


@dataclass
class Document:
    doc_id: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass
class Chunk:
    chunk_id: str
    doc_id: str
    index: int
    text: str
    token_count: int
    decontextualized_text: str | None = None
    rouge_f1: float | None = None
    drift_rejected: bool = False
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def effective_text(self) -> str:
        """Text used for extraction: the accepted rewrite, else the original."""
        return self.decontextualized_text if self.decontextualized_text is not None else self.text


@dataclass
class EntityNode:
    name: str
    type_label: str = UNKNOWN_TYPE
    entity_id: str = ""
    normalized_name: str = ""

    def __post_init__(self) -> None:
        self.normalized_name = normalize_name(self.name)
        if not self.entity_id:
            self.entity_id = entity_id_for(self.normalized_name)


@dataclass
class Proposition:
    prop_id: str
    text: str
    chunk_id: str
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass
class Quadruplet:
    quad_id: str
    source: str
    predicate: str
    target: str
    prop_id: str
    chunk_id: str
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class GroundTruthTriplet:
    question_id: str
    head: str
    relation: str
    tail: str
    answer_role: Literal["head", "relation", "tail"]

    @property
    def canonical_text(self) -> str:
        return triplet_text(self.head, self.relation, self.tail)


def triplet_text(head: str, predicate: str, tail: str) -> str:
    """Canonical serialization used for triplet embeddings and token F1."""
    return f"{head} | {predicate} | {tail}"


class KnowledgeGraph:
    """Bipartite entity/proposition graph plus the chunks and quadruplets behind it.

    Mutable while assembling; :meth:`freeze` validates referential integrity and
    makes every structural mutator raise :class:`FrozenGraphError`. Embedding
    caches on nodes may still be filled after freezing.
    """

    def __init__(self) -> None:
        self.entities: dict[str, EntityNode] = {}
        self.propositions: dict[str, Proposition] = {}
        self.quadruplets: list[Quadruplet] = []
        self.chunks: dict[str, Chunk] = {}
        self._by_norm: dict[str, str] = {}
        self._quad_ids: set[str] = set()
        self._entity_props: dict[str, set[str]] = {}
        self._prop_entities: dict[str, set[str]] = {}
        self._frozen = False

    # -- assembly ---------------------------------------------------------

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _check_mutable(self) -> None:
        if self._frozen:
            raise FrozenGraphError("graph is frozen")

    def merge_entity(self, candidate: EntityNode) -> str:
        """Insert ``candidate`` or fold it into the node with the same normalized name.

        On a match the longer surface form is kept as ``name``; the existing
        ``type_label`` wins unless it is unknown.
        """
        if not candidate.name or not candidate.name.strip():
            raise InvalidEntityError("entity name must be non-empty")
        self._check_mutable()
        norm = normalize_name(candidate.name)
        existing_id = self._by_norm.get(norm)
        if existing_id is not None:
            node = self.entities[existing_id]
            stripped = " ".join(candidate.name.split())
            if len(stripped) > len(node.name):
                node.name = stripped
            if node.type_label == UNKNOWN_TYPE and candidate.type_label != UNKNOWN_TYPE:
                node.type_label = candidate.type_label
            return existing_id
        node = EntityNode(
            name=" ".join(candidate.name.split()),
            type_label=candidate.type_label or UNKNOWN_TYPE,
            entity_id=candidate.entity_id or entity_id_for(norm),
        )
        if node.entity_id in self.entities:
            raise IntegrityError(f"entity id collision: {node.entity_id}")
        self.entities[node.entity_id] = node
        self._by_norm[norm] = node.entity_id
        self._entity_props[node.entity_id] = set()
        return node.entity_id

    def add_chunk(self, chunk: Chunk) -> None:
        self._check_mutable()
        if chunk.chunk_id in self.chunks:
            raise IntegrityError(f"duplicate chunk id: {chunk.chunk_id}")
        self.chunks[chunk.chunk_id] = chunk

    def add_proposition(self, prop: Proposition) -> None:
        self._check_mutable()
        if not prop.text.strip():
            raise IntegrityError(f"proposition {prop.prop_id} has empty text")
        if prop.chunk_id not in self.chunks:
            raise NodeNotFoundError(f"proposition {prop.prop_id} references unknown chunk {prop.chunk_id}")
        if prop.prop_id in self.propositions:
            raise IntegrityError(f"duplicate proposition id: {prop.prop_id}")
        self.propositions[prop.prop_id] = prop
        self._prop_entities[prop.prop_id] = set()

    def add_quadruplet(self, quad: Quadruplet) -> None:
        self._check_mutable()
        if not quad.predicate.strip():
            raise IntegrityError(f"quadruplet {quad.quad_id} has empty predicate")
        for ref, table, what in (
            (quad.source, self.entities, "entity"),
            (quad.target, self.entities, "entity"),
            (quad.prop_id, self.propositions, "proposition"),
            (quad.chunk_id, self.chunks, "chunk"),
        ):
            if ref not in table:
                raise NodeNotFoundError(f"quadruplet {quad.quad_id} references unknown {what} {ref}")
        if quad.quad_id in self._quad_ids:
            raise IntegrityError(f"duplicate quadruplet id: {quad.quad_id}")
        self.quadruplets.append(quad)
        self._quad_ids.add(quad.quad_id)
        for ent in (quad.source, quad.target):
            self._entity_props[ent].add(quad.prop_id)
            self._prop_entities[quad.prop_id].add(ent)

    def absorb(self, other: KnowledgeGraph) -> None:
        """Merge another graph's nodes and edges into this one (corpus assembly)."""
        self._check_mutable()
        remap: dict[str, str] = {}
        for ent in other.entities.values():
            remap[ent.entity_id] = self.merge_entity(
                EntityNode(name=ent.name, type_label=ent.type_label)
            )
        for chunk in other.chunks.values():
            self.add_chunk(chunk)
        for prop in other.propositions.values():
            self.add_proposition(prop)
        for quad in other.quadruplets:
            self.add_quadruplet(
                replace(quad, source=remap[quad.source], target=remap[quad.target])
            )

    def freeze(self) -> KnowledgeGraph:
        self.validate()
        self._frozen = True
        return self

    # -- queries ----------------------------------------------------------

    def neighbors(self, node_id: str, node_kind: NodeKind) -> set[str]:
        if node_kind == "entity":
            table = self._entity_props
        elif node_kind == "proposition":
            table = self._prop_entities
        else:
            raise ValueError(f"unknown node kind: {node_kind!r}")
        try:
            return set(table[node_id])
        except KeyError:
            raise NodeNotFoundError(f"no {node_kind} with id {node_id}") from None

    def entity_by_name(self, name: str) -> EntityNode | None:
        ent_id = self._by_norm.get(normalize_name(name))
        return self.entities[ent_id] if ent_id is not None else None

    def quadruplet_text(self, quad: Quadruplet) -> str:
        return triplet_text(self.entities[quad.source].name, quad.predicate, self.entities[quad.target].name)

    def quadruplets_by_id(self) -> dict[str, Quadruplet]:
        return {q.quad_id: q for q in self.quadruplets}

    def dedup_quadruplets(self) -> list[Quadruplet]:
        """First occurrence of each (source, predicate, target), ignoring provenance."""
        seen: set[tuple[str, str, str]] = set()
        out = []
        for quad in self.quadruplets:
            key = (quad.source, " ".join(quad.predicate.split()).casefold(), quad.target)
            if key not in seen:
                seen.add(key)
                out.append(quad)
        return out

    def chunks_of(self, doc_id: str) -> list[Chunk]:
        return sorted((c for c in self.chunks.values() if c.doc_id == doc_id), key=lambda c: c.index)

    def doc_ids(self) -> list[str]:
        return sorted({c.doc_id for c in self.chunks.values()})

    def iter_edges(self) -> Iterator[tuple[str, str]]:
        for ent, props in self._entity_props.items():
            for prop in props:
                yield ent, prop

    def validate(self) -> None:
        """Full-scan integrity check; raises :class:`IntegrityError` on the first violation."""
        norms: dict[str, str] = {}
        for ent_id, ent in self.entities.items():
            if not ent.name.strip():
                raise IntegrityError(f"entity {ent_id} has empty name")
            if ent.normalized_name != normalize_name(ent.name):
                raise IntegrityError(f"entity {ent_id} normalized name is stale")
            if ent.normalized_name in norms:
                raise IntegrityError(
                    f"entities {norms[ent.normalized_name]} and {ent_id} share normalized name"
                )
            norms[ent.normalized_name] = ent_id
        by_doc: dict[str, list[int]] = {}
        for chunk in self.chunks.values():
            by_doc.setdefault(chunk.doc_id, []).append(chunk.index)
            if chunk.index == 0 and chunk.decontextualized_text is not None:
                raise IntegrityError(f"chunk {chunk.chunk_id} is first in its document but rewritten")
            if chunk.decontextualized_text is not None and chunk.rouge_f1 is None:
                raise IntegrityError(f"chunk {chunk.chunk_id} rewritten without a ROUGE score")
            if chunk.rouge_f1 is not None and not 0.0 <= chunk.rouge_f1 <= 1.0:
                raise IntegrityError(f"chunk {chunk.chunk_id} ROUGE score out of range")
        for doc_id, indices in by_doc.items():
            if sorted(indices) != list(range(len(indices))):
                raise IntegrityError(f"document {doc_id} chunk indices are not consecutive from 0")
        referenced: set[str] = set()
        for quad in self.quadruplets:
            for ref, table in (
                (quad.source, self.entities),
                (quad.target, self.entities),
                (quad.prop_id, self.propositions),
                (quad.chunk_id, self.chunks),
            ):
                if ref not in table:
                    raise IntegrityError(f"quadruplet {quad.quad_id} has dangling reference {ref}")
            if not quad.predicate.strip():
                raise IntegrityError(f"quadruplet {quad.quad_id} has empty predicate")
            referenced.add(quad.prop_id)
        for prop in self.propositions.values():
            if prop.chunk_id not in self.chunks:
                raise IntegrityError(f"proposition {prop.prop_id} has dangling chunk {prop.chunk_id}")
            if prop.prop_id not in referenced:
                raise IntegrityError(f"proposition {prop.prop_id} is not referenced by any quadruplet")

    # -- comparison -------------------------------------------------------

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.propositions == other.propositions
            and self.chunks == other.chunks
            and sorted(self.quadruplets, key=_quad_key) == sorted(other.quadruplets, key=_quad_key)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(entities={len(self.entities)}, propositions={len(self.propositions)}, "
            f"quadruplets={len(self.quadruplets)}, chunks={len(self.chunks)}, frozen={self._frozen})"
        )


def _quad_key(quad: Quadruplet) -> str:
    return quad.quad_id


def merge_entity(graph: KnowledgeGraph, candidate: EntityNode) -> str:
    return graph.merge_entity(candidate)


def neighbors(graph: KnowledgeGraph, node_id: str, node_kind: NodeKind) -> set[str]:
    return graph.neighbors(node_id, node_kind)


def merge_graphs(graphs: Iterable[KnowledgeGraph]) -> KnowledgeGraph:
    merged = KnowledgeGraph()
    for graph in graphs:
        merged.absorb(graph)
    return merged.freeze()
