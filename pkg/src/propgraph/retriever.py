"""Dense, proposition-entity graph, Graph+LLM and chain-of-triplet retrieval."""

from __future__ import annotations

import logging
import re
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal

from . import prompts
from .client import ChatClient, ClientError, EmbedClient, ask
from .model import KnowledgeGraph, triplet_text
from .store import IndexedGraph, VectorIndex
from .text import normalize_name

log = logging.getLogger(__name__)

Mode = Literal["dense", "graph", "graph_llm", "chain_of_triplet"]
MODES: tuple[str, ...] = ("dense", "graph", "graph_llm", "chain_of_triplet")

DEFAULT_M = 200
DEFAULT_N_HOPS = 5
DEFAULT_K = 10
DEFAULT_PATH_HOPS = 2
DEFAULT_PER_QUERY = 20

_PLACEHOLDER_RE = re.compile(r"#\d+")


class DecompositionError(ValueError):
    def __init__(self, message: str, raw_output: str) -> None:
        super().__init__(message)
        self.raw_output = raw_output


@dataclass
class RetrievalResult:
    query_id: str
    mode: str
    ranked_chunks: list[tuple[str, float]] = field(default_factory=list)
    selected_props: list[str] = field(default_factory=list)
    hop_paths: list[list[str]] = field(default_factory=list)
    trace: dict = field(default_factory=dict)

    @property
    def chunk_ids(self) -> list[str]:
        return [c for c, _ in self.ranked_chunks]

    def to_record(self, digits: int = 6) -> dict:
        return {
            "query_id": self.query_id,
            "mode": self.mode,
            "ranked_chunks": [[c, round(s, digits)] for c, s in self.ranked_chunks],
            "selected_props": list(self.selected_props),
            "hop_paths": [list(p) for p in self.hop_paths],
        }


def _rank_chunk_ids(
    chunk_ids: set[str] | Sequence[str], query_vec, chunk_index: VectorIndex, k: int
) -> list[tuple[str, float]]:
    wanted = set(chunk_ids)
    if not wanted:
        return []
    ranked = chunk_index.top_m(query_vec, len(chunk_index))
    return [(cid, s) for cid, s in ranked if cid in wanted][:k]


def dense_retrieve(
    query: str,
    indexed: IndexedGraph,
    embedder: EmbedClient,
    k: int = DEFAULT_K,
    query_id: str = "",
) -> RetrievalResult:
    """Top-k chunks by cosine similarity to the query."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(indexed.chunks):
        return RetrievalResult(query_id, "dense")
    qvec = embedder.embed([query])[0]
    return RetrievalResult(query_id, "dense", ranked_chunks=indexed.chunks.top_m(qvec, k))


# -- question entities ----------------------------------------------------


def extract_question_entities(query: str, graph: KnowledgeGraph) -> list[str]:
    """Entity ids whose normalized names occur in the query at word boundaries.

    Longer matches win; a match overlapping an already accepted longer one is
    dropped. Results are in order of appearance in the query.
    """
    text = normalize_name(query)
    spans: list[tuple[int, int, str]] = []
    for ent in graph.entities.values():
        name = ent.normalized_name
        if not name:
            continue
        for m in re.finditer(r"(?<!\w)" + re.escape(name) + r"(?!\w)", text):
            spans.append((m.start(), m.end(), ent.entity_id))
    spans.sort(key=lambda s: (-(s[1] - s[0]), s[0], s[2]))
    taken: list[tuple[int, int, str]] = []
    for start, end, ent_id in spans:
        if all(end <= s or start >= e for s, e, _ in taken):
            taken.append((start, end, ent_id))
    seen: set[str] = set()
    out = []
    for _, _, ent_id in sorted(taken):
        if ent_id not in seen:
            seen.add(ent_id)
            out.append(ent_id)
    return out


def llm_question_entities(query: str, graph: KnowledgeGraph, chat: ChatClient) -> list[str]:
    """Chat-based alternative: ask for entity names, keep those present in the graph."""
    raw = ask(chat, prompts.render("question_entities", question=query))
    out: list[str] = []
    for line in raw.splitlines():
        name = line.strip().lstrip("-*0123456789. ").strip()
        ent = graph.entity_by_name(name) if name else None
        if ent is not None and ent.entity_id not in out:
            out.append(ent.entity_id)
    return out


EntityExtractor = Callable[[str, KnowledgeGraph], list[str]]


# -- graph retrieval ------------------------------------------------------


def bfs_propositions(
    graph: KnowledgeGraph,
    candidates: Sequence[str],
    start_entities: Sequence[str],
    n_hops: int,
) -> dict[str, list[str]]:
    """Propositions within ``n_hops`` bipartite edges of any start entity.

    The traversal is restricted to the subgraph induced by ``candidates`` and
    their linked entities. Returns ``prop_id -> path`` where ``path`` is one
    shortest alternating entity/proposition path from a start entity.
    """
    allowed_props = set(candidates)
    parent: dict[tuple[str, str], tuple[str, str] | None] = {}
    frontier: deque[tuple[str, str, int]] = deque()
    for ent in start_entities:
        key = ("entity", ent)
        if key not in parent and ent in graph.entities:
            parent[key] = None
            frontier.append(("entity", ent, 0))
    while frontier:
        kind, node, dist = frontier.popleft()
        if dist == n_hops:
            continue
        if kind == "entity":
            nxt = sorted(p for p in graph.neighbors(node, "entity") if p in allowed_props)
            nkind = "proposition"
        else:
            nxt = sorted(graph.neighbors(node, "proposition"))
            nkind = "entity"
        for other in nxt:
            key = (nkind, other)
            if key not in parent:
                parent[key] = (kind, node)
                frontier.append((nkind, other, dist + 1))

    kept: dict[str, list[str]] = {}
    for (kind, node) in parent:
        if kind != "proposition":
            continue
        path = [node]
        step = parent[(kind, node)]
        while step is not None:
            path.append(step[1])
            step = parent[step]
        kept[node] = path[::-1]
    return kept


def graph_retrieve(
    query: str,
    indexed: IndexedGraph,
    embedder: EmbedClient,
    m: int = DEFAULT_M,
    n_hops: int = DEFAULT_N_HOPS,
    k: int = DEFAULT_K,
    query_id: str = "",
    entity_extractor: EntityExtractor = extract_question_entities,
) -> RetrievalResult:
    """Proposition-entity graph retriever.

    1. top-``m`` propositions by embedding similarity;
    2. subgraph of those propositions and their entities;
    3. keep propositions within ``n_hops`` edges of a question entity;
    4. rank the kept propositions' chunks by similarity to the query, top ``k``.

    With no question entity in the graph, step 3 is skipped and the chunks of
    all step-1 propositions are ranked.
    """
    if min(m, n_hops, k) < 1:
        raise ValueError("m, n_hops and k must be >= 1")
    graph = indexed.graph
    result = RetrievalResult(query_id, "graph")
    if not len(indexed.propositions):
        return result
    qvec = embedder.embed([query])[0]
    candidates = indexed.propositions.top_m(qvec, m)
    cand_ids = [p for p, _ in candidates]
    question_entities = entity_extractor(query, graph)

    if question_entities:
        paths = bfs_propositions(graph, cand_ids, question_entities, n_hops)
        selected = [p for p in cand_ids if p in paths]
        hop_paths = [paths[p] for p in selected]
    else:
        selected, hop_paths = cand_ids, []

    chunk_ids = {graph.propositions[p].chunk_id for p in selected}
    result.ranked_chunks = _rank_chunk_ids(chunk_ids, qvec, indexed.chunks, k)
    result.selected_props = selected
    result.hop_paths = hop_paths
    result.trace = {
        "candidates": [[p, round(s, 6)] for p, s in candidates],
        "question_entities": question_entities,
        "fallback_no_entities": not question_entities,
        "kept": {p: (len(path) - 1) for p, path in zip(selected, hop_paths)},
    }
    return result


def parse_indices(raw: str, n: int) -> list[int] | None:
    """1-based indices in reply order, deduplicated and range-filtered; None if none parse."""
    found = re.findall(r"\d+", raw)
    if not found:
        return None
    out: list[int] = []
    for tok in found:
        i = int(tok)
        if 1 <= i <= n and i - 1 not in out:
            out.append(i - 1)
    return out


def llm_rerank(query: str, candidate_props: Sequence[str], graph: KnowledgeGraph, chat: ChatClient) -> list[str]:
    """Ask the chat model which numbered propositions answer the query, in its order."""
    if not candidate_props:
        raise ValueError("candidate_props must be non-empty")
    listing = "\n".join(f"{i}. {graph.propositions[p].text}" for i, p in enumerate(candidate_props, 1))
    raw = ask(chat, prompts.render("rerank", question=query, facts=listing))
    picked = parse_indices(raw, len(candidate_props))
    if picked is None:
        log.warning("rerank reply had no indices: %r", raw[:200])
        return []
    return [candidate_props[i] for i in picked]


def graph_llm_retrieve(
    query: str,
    indexed: IndexedGraph,
    embedder: EmbedClient,
    chat: ChatClient,
    m: int = DEFAULT_M,
    n_hops: int = DEFAULT_N_HOPS,
    k: int = DEFAULT_K,
    query_id: str = "",
    entity_extractor: EntityExtractor = extract_question_entities,
) -> RetrievalResult:
    """Graph retrieval followed by LLM selection of the necessary propositions.

    Chunks of the selected propositions come first (selection order), then the
    graph ranking fills the remaining slots up to ``k``.
    """
    base = graph_retrieve(query, indexed, embedder, m, n_hops, k, query_id, entity_extractor)
    base.mode = "graph_llm"
    if not base.selected_props:
        return base
    try:
        chosen = llm_rerank(query, base.selected_props, indexed.graph, chat)
    except ClientError as exc:
        log.warning("rerank failed, keeping graph ranking: %s", exc)
        base.trace["rerank"] = {"error": str(exc)}
        return base
    base.trace["rerank"] = {"selected": chosen}
    if not chosen:
        return base

    graph = indexed.graph
    qvec = embedder.embed([query])[0]
    chunk_scores = dict(zip(indexed.chunks.ids, indexed.chunks.scores(qvec)))
    ranked: list[tuple[str, float]] = []
    seen: set[str] = set()
    for prop in chosen:
        cid = graph.propositions[prop].chunk_id
        if cid not in seen:
            seen.add(cid)
            ranked.append((cid, float(chunk_scores[cid])))
    kept_chunks = {graph.propositions[p].chunk_id for p in base.selected_props}
    for cid, score in _rank_chunk_ids(kept_chunks, qvec, indexed.chunks, len(kept_chunks)):
        if cid not in seen:
            seen.add(cid)
            ranked.append((cid, score))
    base.ranked_chunks = ranked[:k]
    return base


# -- chain of triplets ----------------------------------------------------


@dataclass
class TripletQuery:
    head: str
    relation: str
    tail: str
    position: int

    def __post_init__(self) -> None:
        parts = (self.head, self.relation, self.tail)
        if any(p.startswith("#") and not _PLACEHOLDER_RE.fullmatch(p) for p in parts):
            raise ValueError(f"malformed placeholder in {parts}")
        if all(_PLACEHOLDER_RE.fullmatch(p) for p in parts):
            raise ValueError("triplet query needs at least one non-placeholder part")

    @property
    def parts(self) -> tuple[str, str, str]:
        return (self.head, self.relation, self.tail)

    def __str__(self) -> str:
        return f"{self.head} || {self.relation} || {self.tail}"


def parse_triplet_lines(raw: str) -> list[tuple[str, str, str]]:
    """Lines of ``head || relation || tail`` with three non-empty parts."""
    out = []
    for line in raw.splitlines():
        if "||" not in line:
            continue
        parts = [p.strip().strip("`").strip() for p in line.split("||")]
        if len(parts) == 3 and all(parts):
            out.append((parts[0], parts[1], parts[2]))
    return out


def decompose_to_triplet_chain(question: str, chat: ChatClient) -> list[TripletQuery]:
    if not question.strip():
        raise ValueError("question must be non-empty")
    raw = ask(chat, prompts.render("triplet_chain", question=question))
    chain: list[TripletQuery] = []
    for head, rel, tail in parse_triplet_lines(raw):
        try:
            chain.append(TripletQuery(head, rel, tail, position=len(chain)))
        except ValueError as exc:
            log.warning("skipping triplet query line: %s", exc)
    if not chain:
        raise DecompositionError("no parseable triplet query in reply", raw)
    return chain


@dataclass
class ChainRetrieval:
    chain: list[TripletQuery]
    resolved_queries: list[tuple[str, str, str]] = field(default_factory=list)
    retrieved: list[list[tuple[str, float]]] = field(default_factory=list)
    bindings: dict[str, str] = field(default_factory=dict)
    unresolved: list[str] = field(default_factory=list)

    def quad_ids(self) -> list[str]:
        """Retrieved triplet ids across the chain, first occurrence order."""
        seen: dict[str, None] = {}
        for hits in self.retrieved:
            for qid, _ in hits:
                seen.setdefault(qid, None)
        return list(seen)

    def proposition_ids(self, graph: KnowledgeGraph) -> list[str]:
        by_id = graph.quadruplets_by_id()
        seen: dict[str, None] = {}
        for qid in self.quad_ids():
            seen.setdefault(by_id[qid].prop_id, None)
        return list(seen)


def _substitute(part: str, bindings: dict[str, str]) -> str:
    return bindings.get(part, part)


def chain_of_triplet_retrieve(
    question: str,
    indexed: IndexedGraph,
    embedder: EmbedClient,
    chat: ChatClient,
    per_query: int = DEFAULT_PER_QUERY,
    chain: Sequence[TripletQuery] | None = None,
) -> ChainRetrieval:
    """Retrieve triplets for each query of a decomposed chain, resolving ``#k`` progressively.

    An unresolved placeholder is embedded as an empty slot. After retrieval,
    each unresolved placeholder takes an endpoint name of the best-ranked
    triplet offering one not already in the query: the same-side endpoint
    first (source for head, target for tail), else the other. A relation
    placeholder takes the predicate.
    """
    graph = indexed.graph
    if chain is None:
        chain = decompose_to_triplet_chain(question, chat)
    out = ChainRetrieval(chain=list(chain))
    by_id = graph.quadruplets_by_id()

    for tq in chain:
        parts = [_substitute(p, out.bindings) for p in tq.parts]
        out.resolved_queries.append(tuple(parts))
        if not len(indexed.triplets):
            out.retrieved.append([])
            continue
        rendered = triplet_text(*("" if _PLACEHOLDER_RE.fullmatch(p) else p for p in parts))
        qvec = embedder.embed([rendered])[0]
        hits = indexed.triplets.top_m(qvec, per_query)
        out.retrieved.append(hits)

        present = {normalize_name(p) for p in parts if not _PLACEHOLDER_RE.fullmatch(p)}
        for slot, part in enumerate(parts):
            if not _PLACEHOLDER_RE.fullmatch(part) or part in out.bindings:
                continue
            value = _resolve_slot(slot, hits, by_id, graph, present)
            if value is not None:
                out.bindings[part] = value
                present.add(normalize_name(value))

    for tq in chain:
        for p in tq.parts:
            if _PLACEHOLDER_RE.fullmatch(p) and p not in out.bindings and p not in out.unresolved:
                out.unresolved.append(p)
    return out


def _resolve_slot(slot, hits, by_id, graph: KnowledgeGraph, present: set[str]) -> str | None:
    for quad_id, _ in hits:
        quad = by_id[quad_id]
        if slot == 1:
            return quad.predicate
        src = graph.entities[quad.source].name
        dst = graph.entities[quad.target].name
        order = (src, dst) if slot == 0 else (dst, src)
        for name in order:
            if normalize_name(name) not in present:
                return name
    return None


def chain_result(
    chain_out: ChainRetrieval, indexed: IndexedGraph, k: int = DEFAULT_K, query_id: str = ""
) -> RetrievalResult:
    """Project a chain retrieval onto chunks: best triplet score per provenance chunk."""
    by_id = indexed.graph.quadruplets_by_id()
    best: dict[str, float] = {}
    for hits in chain_out.retrieved:
        for qid, score in hits:
            cid = by_id[qid].chunk_id
            best[cid] = max(best.get(cid, float("-inf")), score)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return RetrievalResult(
        query_id,
        "chain_of_triplet",
        ranked_chunks=ranked,
        selected_props=chain_out.proposition_ids(indexed.graph),
        trace={
            "chain": [str(t) for t in chain_out.chain],
            "resolved_queries": [" || ".join(q) for q in chain_out.resolved_queries],
            "bindings": dict(chain_out.bindings),
            "unresolved": list(chain_out.unresolved),
            "retrieved": [[[q, round(s, 6)] for q, s in hits] for hits in chain_out.retrieved],
        },
    )


# -- answering ------------------------------------------------------------


def render_paths(graph: KnowledgeGraph, paths: Sequence[Sequence[str]], max_hops: int) -> list[str]:
    """Readable entity -> proposition -> entity paths of at most ``max_hops`` edges."""
    lines = []
    for path in paths:
        if len(path) - 1 > max_hops:
            continue
        parts = []
        for node in path:
            if node in graph.entities:
                parts.append(graph.entities[node].name)
            else:
                parts.append(f"[{graph.propositions[node].text}]")
        lines.append(" -> ".join(parts))
    return lines


def answer_with_context(
    question: str,
    chat: ChatClient,
    style: Literal["chunks", "triplets"] = "chunks",
    *,
    chunks: Sequence[str] = (),
    paths: Sequence[str] = (),
    chain: Sequence[TripletQuery | str] = (),
    triplets: Sequence[str] = (),
    facts: Sequence[str] = (),
    allow_empty: bool = False,
) -> str:
    """Fill the chunk or triplet answer template and return the trimmed reply."""
    if style == "triplets":
        if not (triplets or facts) and not allow_empty:
            raise ValueError("empty context; pass allow_empty=True to answer anyway")
        prompt = prompts.render(
            "triplet_answer",
            question=question,
            question_triplets="\n".join(str(t) for t in chain),
            retrieved_triplets="\n".join(triplets),
            retrieved_facts="\n".join(facts),
        )
    elif style == "chunks":
        if not (chunks or paths) and not allow_empty:
            raise ValueError("empty context; pass allow_empty=True to answer anyway")
        context = "\n\n".join(chunks)
        if paths:
            context += ("\n\n" if context else "") + "Knowledge graph paths:\n" + "\n".join(paths)
        prompt = prompts.render("chunk_answer", question=question, context=context)
    else:
        raise ValueError(f"unknown answer style {style!r}")
    return ask(chat, prompt).strip()
