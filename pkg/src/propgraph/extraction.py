"""Entity, relation and proposition extraction and KG assembly.

Two modes produce schema-identical graphs:

* multi-step: chunk, decontextualize (all but the first chunk), extract
  entities, extract facts with triplets, per chunk;
* single-step: one call over the whole document emitting the same fact/triplet
  JSON, for a distilled model.
"""

from __future__ import annotations

import ast
import json
import logging
import re
import threading
from collections import Counter
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import prompts
from .chunker import (
    DEFAULT_DRIFT_THRESHOLD,
    DEFAULT_MAX_TOKENS,
    PipelineError,
    decontextualize,
    split_document,
)
from .client import ChatClient, ClientError, ask
from .model import (
    UNKNOWN_TYPE,
    Chunk,
    Document,
    EntityNode,
    KnowledgeGraph,
    Proposition,
    Quadruplet,
    merge_graphs,
    proposition_id_for,
    quadruplet_id_for,
)
from .text import normalize_name, word_count, words

log = logging.getLogger(__name__)


class ExtractionParseError(ValueError):
    def __init__(self, message: str, raw_output: str) -> None:
        super().__init__(message)
        self.raw_output = raw_output


class DocumentExtractionError(RuntimeError):
    def __init__(self, doc_id: str, failures: list[dict]) -> None:
        super().__init__(f"every chunk of document {doc_id!r} failed extraction")
        self.doc_id = doc_id
        self.failures = failures


@dataclass(frozen=True)
class FactRecord:
    fact_text: str
    triplets: tuple[tuple[str, str, str], ...]


@dataclass
class SynthesisConfig:
    max_tokens: int = DEFAULT_MAX_TOKENS
    drift_threshold: float = DEFAULT_DRIFT_THRESHOLD
    max_workers: int = 4


@dataclass
class ExtractionLog:
    """Failure records and warning counters collected across a run (thread-safe)."""

    failures: list[dict] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)
    empty_kg_docs: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def count(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.counters[key] += n

    def record_failure(self, doc_id: str, chunk_id: str | None, stage: str, raw_output: str | None, error: str) -> None:
        with self._lock:
            self.failures.append(
                {"doc_id": doc_id, "chunk_id": chunk_id, "stage": stage, "raw_output": raw_output, "error": error}
            )

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.failures:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


# -- JSON parsing with repair ---------------------------------------------

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")


def parse_json_object(raw: str) -> dict:
    """Parse a near-JSON object emitted by a language model.

    Repairs tried in order: code-fence stripping and cropping to the outermost
    braces, trailing-comma removal, Python-literal parsing (single-quoted
    strings), then a blunt single-to-double quote swap.
    """
    attempts: list[str] = []
    text = raw.strip()
    attempts.append(text)
    fenced = _FENCE_RE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    lo, hi = text.find("{"), text.rfind("}")
    if lo != -1 and hi > lo:
        text = text[lo : hi + 1]
    attempts.append(text)
    no_commas = _TRAILING_COMMA_RE.sub(r"\1", text)
    attempts.append(no_commas)
    for candidate in attempts:
        try:
            value = json.loads(candidate)
        except ValueError:
            continue
        if isinstance(value, dict):
            return value
    try:
        value = ast.literal_eval(no_commas)
        if isinstance(value, dict):
            return value
    except (ValueError, SyntaxError, MemoryError, RecursionError):
        pass
    try:
        value = json.loads(no_commas.replace("'", '"'))
        if isinstance(value, dict):
            return value
    except ValueError:
        pass
    raise ExtractionParseError("model output is not a JSON object", raw)


# -- per-chunk extraction -------------------------------------------------


def parse_entities(raw: str, stats: ExtractionLog | None = None) -> list[EntityNode]:
    data = parse_json_object(raw)
    out: list[EntityNode] = []
    seen: set[str] = set()
    for key, entry in data.items():
        name = entry.get("name") if isinstance(entry, dict) else None
        etype = entry.get("type") if isinstance(entry, dict) else None
        if not isinstance(name, str) or not name.strip() or not isinstance(etype, str):
            log.warning("skipping entity entry %r: missing name/type", key)
            if stats is not None:
                stats.count("skipped_entities")
            continue
        node = EntityNode(name=" ".join(name.split()), type_label=etype.strip() or UNKNOWN_TYPE)
        if node.normalized_name in seen:
            continue
        seen.add(node.normalized_name)
        out.append(node)
    return out


def extract_entities(chunk_text: str, chat: ChatClient, stats: ExtractionLog | None = None) -> list[EntityNode]:
    """Named entities with free-form types, in model order, deduplicated by normalized name."""
    if not chunk_text.strip():
        raise ValueError("chunk text must be non-empty")
    raw = ask(chat, prompts.render("entities", paragraph=chunk_text))
    return parse_entities(raw, stats)


def parse_facts(
    raw: str,
    entity_names: Iterable[str] | None = None,
    stats: ExtractionLog | None = None,
) -> list[FactRecord]:
    """Parse ``{"f1": {"fact", "triplets"}, ...}``.

    Triplets without three non-empty string parts are dropped. When
    ``entity_names`` is given, triplets with neither endpoint in it are
    rejected. Facts left without triplets are dropped.
    """
    data = parse_json_object(raw)
    allowed = None if entity_names is None else {normalize_name(n) for n in entity_names}
    facts: list[FactRecord] = []
    for key, entry in data.items():
        if not isinstance(entry, dict):
            _bump(stats, "malformed_facts")
            continue
        fact_text = entry.get("fact")
        raw_triplets = entry.get("triplets")
        if not isinstance(fact_text, str) or not fact_text.strip() or not isinstance(raw_triplets, list):
            log.warning("skipping fact %r: missing fact text or triplet list", key)
            _bump(stats, "malformed_facts")
            continue
        kept: list[tuple[str, str, str]] = []
        for trip in raw_triplets:
            if (
                not isinstance(trip, (list, tuple))
                or len(trip) != 3
                or not all(isinstance(p, str) and p.strip() for p in trip)
            ):
                _bump(stats, "malformed_triplets")
                continue
            head, pred, tail = (" ".join(p.split()) for p in trip)
            if allowed is not None and normalize_name(head) not in allowed and normalize_name(tail) not in allowed:
                _bump(stats, "rejected_triplets")
                continue
            kept.append((head, pred, tail))
        if not kept:
            _bump(stats, "dropped_facts")
            continue
        facts.append(FactRecord(" ".join(fact_text.split()), tuple(kept)))
    return facts


def _bump(stats: ExtractionLog | None, key: str) -> None:
    if stats is not None:
        stats.count(key)


def extract_relations(
    chunk_text: str,
    entities: Sequence[EntityNode],
    chat: ChatClient,
    stats: ExtractionLog | None = None,
) -> list[FactRecord]:
    if not chunk_text.strip():
        raise ValueError("chunk text must be non-empty")
    # Only names condition the relation prompt; types stay on the nodes.
    names = [e.name for e in entities]
    raw = ask(chat, prompts.render("relations", paragraph=chunk_text, entities=", ".join(names)))
    return parse_facts(raw, names, stats)


# -- assembly -------------------------------------------------------------


def assemble_chunk_facts(
    graph: KnowledgeGraph,
    chunk: Chunk,
    entities: Sequence[EntityNode],
    facts: Sequence[FactRecord],
) -> None:
    """Merge one chunk's entities and facts into ``graph``.

    Each fact becomes a proposition and each triplet a quadruplet. Triplet
    endpoints missing from ``entities`` enter the graph with type ``unknown``.
    """
    types = {e.normalized_name: e.type_label for e in entities}
    for ent in entities:
        graph.merge_entity(ent)
    quad_ordinal = 0
    for prop_ordinal, fact in enumerate(facts):
        prop_id = proposition_id_for(chunk.chunk_id, prop_ordinal)
        graph.add_proposition(Proposition(prop_id=prop_id, text=fact.fact_text, chunk_id=chunk.chunk_id))
        for head, pred, tail in fact.triplets:
            src = graph.merge_entity(EntityNode(head, types.get(normalize_name(head), UNKNOWN_TYPE)))
            dst = graph.merge_entity(EntityNode(tail, types.get(normalize_name(tail), UNKNOWN_TYPE)))
            graph.add_quadruplet(
                Quadruplet(
                    quad_id=quadruplet_id_for(chunk.chunk_id, quad_ordinal),
                    source=src,
                    predicate=pred,
                    target=dst,
                    prop_id=prop_id,
                    chunk_id=chunk.chunk_id,
                )
            )
            quad_ordinal += 1


@dataclass
class _ChunkOutcome:
    chunk: Chunk
    entities: list[EntityNode] = field(default_factory=list)
    facts: list[FactRecord] = field(default_factory=list)
    failed: bool = False


def _process_chunk(
    chunk: Chunk,
    previous: Chunk | None,
    chat: ChatClient,
    config: SynthesisConfig,
    stats: ExtractionLog,
) -> _ChunkOutcome:
    stage = "decontextualize"
    try:
        if previous is not None:
            chunk = decontextualize(chunk, previous, chat, config.drift_threshold)
            if chunk.drift_rejected:
                stats.count("drift_rejected")
        text = chunk.effective_text
        stage = "entities"
        entities = extract_entities(text, chat, stats)
        stage = "relations"
        facts = extract_relations(text, entities, chat, stats)
    except PipelineError as exc:
        stats.record_failure(chunk.doc_id, chunk.chunk_id, exc.stage, exc.raw_output, str(exc))
        return _ChunkOutcome(chunk, failed=True)
    except ExtractionParseError as exc:
        stats.record_failure(chunk.doc_id, chunk.chunk_id, stage, exc.raw_output, str(exc))
        return _ChunkOutcome(chunk, failed=True)
    except ClientError as exc:
        stats.record_failure(chunk.doc_id, chunk.chunk_id, stage, None, str(exc))
        return _ChunkOutcome(chunk, failed=True)
    return _ChunkOutcome(chunk, entities, facts)


def synthesize_multi_step(
    doc: Document,
    chat: ChatClient,
    config: SynthesisConfig | None = None,
    stats: ExtractionLog | None = None,
) -> KnowledgeGraph:
    """Chunk-by-chunk KG synthesis for one document; returns a frozen graph.

    Chunks run concurrently (each decontextualized against its predecessor's
    original text) and are assembled in index order, so the output does not
    depend on scheduling. Failed chunks are logged and contribute no facts.
    """
    config = config or SynthesisConfig()
    stats = stats if stats is not None else ExtractionLog()
    chunks = split_document(doc, config.max_tokens)

    jobs = [(c, chunks[c.index - 1] if c.index else None) for c in chunks]
    if config.max_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            outcomes = list(pool.map(lambda j: _process_chunk(j[0], j[1], chat, config, stats), jobs))
    else:
        outcomes = [_process_chunk(c, p, chat, config, stats) for c, p in jobs]

    if all(o.failed for o in outcomes):
        raise DocumentExtractionError(doc.doc_id, [f for f in stats.failures if f["doc_id"] == doc.doc_id])

    graph = KnowledgeGraph()
    for outcome in outcomes:
        graph.add_chunk(outcome.chunk)
    for outcome in outcomes:
        if not outcome.failed:
            assemble_chunk_facts(graph, outcome.chunk, outcome.entities, outcome.facts)
    if not graph.quadruplets:
        log.warning("document %s produced an empty KG", doc.doc_id)
        stats.empty_kg_docs.append(doc.doc_id)
    return graph.freeze()


def attribute_fact(fact_text: str, chunks: Sequence[Chunk]) -> Chunk:
    """Chunk whose words cover the largest share of the fact's words (ties: earliest)."""
    fact_counts = Counter(words(fact_text))
    best, best_score = chunks[0], -1.0
    total = sum(fact_counts.values()) or 1
    for chunk in chunks:
        score = sum((fact_counts & Counter(words(chunk.text))).values()) / total
        if score > best_score:
            best, best_score = chunk, score
    return best


def synthesize_single_step(
    doc: Document,
    chat: ChatClient,
    config: SynthesisConfig | None = None,
    stats: ExtractionLog | None = None,
) -> KnowledgeGraph:
    """Whole-document KG in one chat call.

    The reply uses the relation prompt's fact/triplet JSON. The document is
    still chunked (without decontextualization) so retrieval has passages;
    each fact is attributed to the chunk that best covers its words.
    """
    config = config or SynthesisConfig()
    stats = stats if stats is not None else ExtractionLog()
    chunks = split_document(doc, config.max_tokens)
    raw = ask(chat, prompts.render("single_step", document=doc.text))
    facts = parse_facts(raw, None, stats)

    graph = KnowledgeGraph()
    for chunk in chunks:
        graph.add_chunk(chunk)
    by_chunk: dict[str, list[FactRecord]] = {}
    for fact in facts:
        by_chunk.setdefault(attribute_fact(fact.fact_text, chunks).chunk_id, []).append(fact)
    for chunk in chunks:
        if chunk.chunk_id in by_chunk:
            assemble_chunk_facts(graph, chunk, [], by_chunk[chunk.chunk_id])
    if not graph.quadruplets:
        log.warning("document %s produced an empty KG", doc.doc_id)
        stats.empty_kg_docs.append(doc.doc_id)
    return graph.freeze()


def synthesize_corpus(
    docs: Sequence[Document],
    chat: ChatClient,
    mode: str = "multi",
    config: SynthesisConfig | None = None,
    stats: ExtractionLog | None = None,
) -> tuple[KnowledgeGraph, list[str]]:
    """Build and merge per-document graphs. Returns the corpus graph and failed doc ids."""
    if mode not in ("multi", "single"):
        raise ValueError(f"unknown synthesis mode {mode!r}")
    stats = stats if stats is not None else ExtractionLog()
    synth = synthesize_multi_step if mode == "multi" else synthesize_single_step
    graphs: list[KnowledgeGraph] = []
    failed: list[str] = []
    for doc in docs:
        try:
            graphs.append(synth(doc, chat, config, stats))
        except DocumentExtractionError:
            failed.append(doc.doc_id)
        except (ExtractionParseError, ClientError) as exc:
            stats.record_failure(doc.doc_id, None, "single_step", getattr(exc, "raw_output", None), str(exc))
            failed.append(doc.doc_id)
    return merge_graphs(graphs), failed


# -- analysis and export --------------------------------------------------


def triplet_density(
    graphs: Sequence[KnowledgeGraph],
    docs: Sequence[Document],
    bucket_width: int = 100,
) -> dict[int, float]:
    """Mean triplets per 100 words, bucketed by document length.

    A document of ``w`` words falls in the bucket labelled by ``w`` rounded up
    to a multiple of ``bucket_width`` (1-100 words -> 100).
    """
    if len(graphs) != len(docs):
        raise ValueError("graphs and docs must be aligned")
    return density_table([(len(g.quadruplets), d) for g, d in zip(graphs, docs)], bucket_width)


def density_table(counts: Iterable[tuple[int, Document]], bucket_width: int = 100) -> dict[int, float]:
    buckets: dict[int, list[float]] = {}
    for n_quads, doc in counts:
        n_words = word_count(doc.text)
        if n_words == 0:
            log.warning("document %s has no words; excluded from density table", doc.doc_id)
            continue
        bucket = -(-n_words // bucket_width) * bucket_width
        buckets.setdefault(bucket, []).append(100.0 * n_quads / n_words)
    return {b: sum(v) / len(v) for b, v in sorted(buckets.items())}


def fact_json(graph: KnowledgeGraph, doc_id: str) -> dict:
    """A document's propositions and triplets in the relation prompt's JSON schema."""
    quads_by_prop: dict[str, list[Quadruplet]] = {}
    for quad in graph.quadruplets:
        quads_by_prop.setdefault(quad.prop_id, []).append(quad)
    out: dict = {}
    for chunk in graph.chunks_of(doc_id):
        props = [p for p in graph.propositions.values() if p.chunk_id == chunk.chunk_id]
        for prop in sorted(props, key=lambda p: p.prop_id):
            quads = sorted(quads_by_prop[prop.prop_id], key=lambda q: q.quad_id)
            out[f"f{len(out) + 1}"] = {
                "fact": prop.text,
                "triplets": [
                    [graph.entities[q.source].name, q.predicate, graph.entities[q.target].name] for q in quads
                ],
            }
    return out
