"""Persistence, embedding indexes and exact cosine search over a frozen graph."""

from __future__ import annotations

import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .client import EmbedClient
from .model import (
    Chunk,
    EntityNode,
    GraphError,
    KnowledgeGraph,
    Proposition,
    Quadruplet,
)

SCHEMA_VERSION = 1
META_FILE = "kg.meta.json"
RECORD_FILES = {
    "entity": "entities.jsonl",
    "proposition": "propositions.jsonl",
    "quadruplet": "quadruplets.jsonl",
    "chunk": "chunks.jsonl",
}
VECTOR_FILES = {
    "proposition": "vectors.bin",
    "chunk": "chunk_vectors.bin",
    "triplet": "triplet_vectors.bin",
}


class StoreError(Exception):
    pass


class VersionError(StoreError):
    pass


class CorruptStoreError(StoreError):
    def __init__(self, message: str, record: str) -> None:
        super().__init__(f"{record}: {message}")
        self.record = record


class InvalidQueryError(ValueError):
    pass


# -- vector index ---------------------------------------------------------


class VectorIndex:
    """Flat matrix of vectors keyed by id; exact cosine search."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray | Sequence[np.ndarray], dim: int | None = None) -> None:
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise ValueError("index ids must be unique")
        matrix = np.asarray(vectors, dtype=np.float64)
        if not ids:
            matrix = np.zeros((0, dim or 0), dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError(f"expected {len(ids)} row vectors, got array of shape {matrix.shape}")
        if dim is not None and ids and matrix.shape[1] != dim:
            raise ValueError(f"vectors have dim {matrix.shape[1]}, expected {dim}")
        # Rows are kept sorted by id so the stable sort in top_m breaks ties by id.
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self.ids = [ids[i] for i in order]
        self.matrix = matrix[order] if ids else matrix
        self.dim = int(self.matrix.shape[1])
        self.norms = np.sqrt((self.matrix * self.matrix).sum(axis=1))

    def __len__(self) -> int:
        return len(self.ids)

    def scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise InvalidQueryError(f"query has shape {q.shape}, index dim is {self.dim}")
        qnorm = float(np.sqrt((q * q).sum()))
        dots = (self.matrix * q).sum(axis=1)
        denom = self.norms * qnorm
        out = np.zeros(len(self.ids), dtype=np.float64)
        nz = denom > 0
        out[nz] = dots[nz] / denom[nz]
        return out

    def top_m(self, query: np.ndarray, m: int) -> list[tuple[str, float]]:
        if m < 1:
            raise InvalidQueryError("m must be >= 1")
        if not self.ids:
            return []
        scores = self.scores(query)
        order = np.argsort(-scores, kind="stable")[:m]
        return [(self.ids[i], float(scores[i])) for i in order]


def top_m(index: VectorIndex, query_vec: np.ndarray, m: int) -> list[tuple[str, float]]:
    """Exact cosine ranking: descending score, ties by ascending id, ``min(m, len)`` rows."""
    return index.top_m(query_vec, m)


def _embed_missing(items: list, texts: list[str], embedder: EmbedClient, what: str, id_attr: str, batch: int) -> None:
    todo = [i for i, item in enumerate(items) if item.embedding is None]
    for start in range(0, len(todo), batch):
        part = todo[start : start + batch]
        try:
            vecs = embedder.embed([texts[i] for i in part])
        except Exception as exc:
            ids = ", ".join(getattr(items[i], id_attr) for i in part[:5])
            raise GraphError(f"embedding {what} failed (batch starting with {ids}): {exc}") from exc
        for i, vec in zip(part, vecs):
            items[i].embedding = np.asarray(vec, dtype=np.float64)


def build_vector_index(graph: KnowledgeGraph, embedder: EmbedClient, batch_size: int = 64) -> VectorIndex:
    """Index every proposition, embedding only those without a cached vector."""
    if not graph.frozen:
        raise GraphError("index building requires a frozen graph")
    props = sorted(graph.propositions.values(), key=lambda p: p.prop_id)
    _embed_missing(props, [p.text for p in props], embedder, "propositions", "prop_id", batch_size)
    return VectorIndex([p.prop_id for p in props], [p.embedding for p in props], dim=embedder.dim or None)


def build_chunk_index(graph: KnowledgeGraph, embedder: EmbedClient, batch_size: int = 64) -> VectorIndex:
    chunks = sorted(graph.chunks.values(), key=lambda c: c.chunk_id)
    _embed_missing(chunks, [c.text for c in chunks], embedder, "chunks", "chunk_id", batch_size)
    return VectorIndex([c.chunk_id for c in chunks], [c.embedding for c in chunks], dim=embedder.dim or None)


def build_triplet_index(graph: KnowledgeGraph, embedder: EmbedClient, batch_size: int = 64) -> VectorIndex:
    quads = sorted(graph.quadruplets, key=lambda q: q.quad_id)
    texts = [graph.quadruplet_text(q) for q in quads]
    _embed_missing(quads, texts, embedder, "triplets", "quad_id", batch_size)
    return VectorIndex([q.quad_id for q in quads], [q.embedding for q in quads], dim=embedder.dim or None)


@dataclass
class IndexedGraph:
    """A frozen graph with its proposition, chunk and triplet indexes."""

    graph: KnowledgeGraph
    propositions: VectorIndex
    chunks: VectorIndex
    triplets: VectorIndex

    @classmethod
    def build(cls, graph: KnowledgeGraph, embedder: EmbedClient, batch_size: int = 64) -> IndexedGraph:
        return cls(
            graph,
            build_vector_index(graph, embedder, batch_size),
            build_chunk_index(graph, embedder, batch_size),
            build_triplet_index(graph, embedder, batch_size),
        )


# -- persistence ----------------------------------------------------------


def _dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def _entity_record(e: EntityNode) -> dict:
    return {"entity_id": e.entity_id, "name": e.name, "type_label": e.type_label, "normalized_name": e.normalized_name}


def _prop_record(p: Proposition) -> dict:
    return {"prop_id": p.prop_id, "text": p.text, "chunk_id": p.chunk_id}


def _quad_record(q: Quadruplet) -> dict:
    return {
        "quad_id": q.quad_id,
        "source": q.source,
        "predicate": q.predicate,
        "target": q.target,
        "prop_id": q.prop_id,
        "chunk_id": q.chunk_id,
    }


def _chunk_record(c: Chunk) -> dict:
    return {
        "chunk_id": c.chunk_id,
        "doc_id": c.doc_id,
        "index": c.index,
        "text": c.text,
        "token_count": c.token_count,
        "decontextualized_text": c.decontextualized_text,
        "rouge_f1": c.rouge_f1,
        "drift_rejected": c.drift_rejected,
    }


def _write_vectors(path: Path, vectors: list[np.ndarray]) -> None:
    dim = int(vectors[0].shape[0]) if vectors else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", dim, len(vectors)))
        if vectors:
            fh.write(np.asarray(vectors, dtype="<f4").tobytes(order="C"))


def _read_vectors(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 8:
        raise CorruptStoreError("truncated header", path.name)
    dim, count = struct.unpack_from("<II", data)
    expected = 8 + 4 * dim * count
    if len(data) != expected:
        raise CorruptStoreError(f"expected {expected} bytes for {count}x{dim} floats, found {len(data)}", path.name)
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64).reshape(count, dim)


def save(graph: KnowledgeGraph, path: str | Path, config_fingerprint: str | None = None) -> Path:
    """Write the graph as sorted line-delimited JSON plus cached vectors; byte-stable."""
    if not graph.frozen:
        raise GraphError("only frozen graphs can be saved")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    tables = {
        "entity": [_entity_record(e) for e in sorted(graph.entities.values(), key=lambda e: e.entity_id)],
        "proposition": [_prop_record(p) for p in sorted(graph.propositions.values(), key=lambda p: p.prop_id)],
        "quadruplet": [_quad_record(q) for q in sorted(graph.quadruplets, key=lambda q: q.quad_id)],
        "chunk": [_chunk_record(c) for c in sorted(graph.chunks.values(), key=lambda c: c.chunk_id)],
    }
    for kind, rows in tables.items():
        with open(root / RECORD_FILES[kind], "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(_dumps({"schema_version": SCHEMA_VERSION, **row}) + "\n")

    cached = {
        "proposition": sorted(graph.propositions.values(), key=lambda p: p.prop_id),
        "chunk": sorted(graph.chunks.values(), key=lambda c: c.chunk_id),
        "triplet": sorted(graph.quadruplets, key=lambda q: q.quad_id),
    }
    written = []
    for kind, items in cached.items():
        target = root / VECTOR_FILES[kind]
        # Rows align with the sorted id order; only complete caches are written.
        if items and all(i.embedding is not None for i in items):
            _write_vectors(target, [i.embedding for i in items])
            written.append(kind)
        elif target.exists():
            target.unlink()

    meta = {
        "schema_version": SCHEMA_VERSION,
        "counts": {kind: len(rows) for kind, rows in tables.items()},
        "config_fingerprint": config_fingerprint,
        "vectors": written,
    }
    (root / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def _read_records(root: Path, kind: str) -> list[tuple[str, dict]]:
    name = RECORD_FILES[kind]
    path = root / name
    if not path.exists():
        raise CorruptStoreError("missing file", name)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{name}:{lineno}"
            try:
                rec = json.loads(line)
            except ValueError as exc:
                raise CorruptStoreError(f"invalid JSON ({exc})", where) from exc
            if not isinstance(rec, dict):
                raise CorruptStoreError("record is not an object", where)
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise VersionError(f"{where}: schema_version {rec.get('schema_version')!r}, expected {SCHEMA_VERSION}")
            out.append((where, rec))
    return out


_CHUNK_FIELD_TYPES = {"chunk_id": str, "doc_id": str, "index": int, "text": str, "token_count": int}


def load(path: str | Path) -> KnowledgeGraph:
    """Load a store written by :func:`save`; verifies versions and referential integrity."""
    root = Path(path)
    meta_path = root / META_FILE
    if not meta_path.exists():
        raise StoreError(f"{root} is not a graph store (no {META_FILE})")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise VersionError(f"store schema_version {meta.get('schema_version')!r}, expected {SCHEMA_VERSION}")

    graph = KnowledgeGraph()
    try:
        for where, rec in _read_records(root, "chunk"):
            for field, kind in _CHUNK_FIELD_TYPES.items():
                if not isinstance(rec.get(field), kind) or isinstance(rec.get(field), bool) and kind is int:
                    raise CorruptStoreError(f"field {field!r} must be {kind.__name__}", where)
            graph.add_chunk(
                Chunk(
                    chunk_id=rec["chunk_id"],
                    doc_id=rec["doc_id"],
                    index=rec["index"],
                    text=rec["text"],
                    token_count=rec["token_count"],
                    decontextualized_text=rec.get("decontextualized_text"),
                    rouge_f1=rec.get("rouge_f1"),
                    drift_rejected=rec.get("drift_rejected", False),
                )
            )
        for where, rec in _read_records(root, "entity"):
            node = EntityNode(name=rec["name"], type_label=rec["type_label"], entity_id=rec["entity_id"])
            if node.normalized_name != rec.get("normalized_name"):
                raise CorruptStoreError("normalized_name does not match name", f"{where} ({rec['entity_id']})")
            if graph.merge_entity(node) != node.entity_id:
                raise CorruptStoreError("duplicate normalized name", f"{where} ({rec['entity_id']})")
        for where, rec in _read_records(root, "proposition"):
            graph.add_proposition(Proposition(prop_id=rec["prop_id"], text=rec["text"], chunk_id=rec["chunk_id"]))
        for where, rec in _read_records(root, "quadruplet"):
            graph.add_quadruplet(
                Quadruplet(
                    quad_id=rec["quad_id"],
                    source=rec["source"],
                    predicate=rec["predicate"],
                    target=rec["target"],
                    prop_id=rec["prop_id"],
                    chunk_id=rec["chunk_id"],
                )
            )
    except CorruptStoreError:
        raise
    except (KeyError, TypeError) as exc:
        raise CorruptStoreError(f"missing or malformed field {exc}", where) from exc
    except GraphError as exc:
        raise CorruptStoreError(str(exc), where) from exc

    try:
        graph.validate()
    except GraphError as exc:
        raise CorruptStoreError(str(exc), "graph") from exc

    _attach_vectors(root, graph)
    return graph.freeze()


def _attach_vectors(root: Path, graph: KnowledgeGraph) -> None:
    targets = {
        "proposition": sorted(graph.propositions.values(), key=lambda p: p.prop_id),
        "chunk": sorted(graph.chunks.values(), key=lambda c: c.chunk_id),
        "triplet": sorted(graph.quadruplets, key=lambda q: q.quad_id),
    }
    for kind, items in targets.items():
        path = root / VECTOR_FILES[kind]
        if not path.exists():
            continue
        matrix = _read_vectors(path)
        if matrix.shape[0] != len(items):
            raise CorruptStoreError(f"{matrix.shape[0]} vectors for {len(items)} records", path.name)
        for item, row in zip(items, matrix):
            item.embedding = row.copy()
