"""Graph builders and scripted chat mocks shared by the tests."""

from __future__ import annotations

import hashlib
import json
import math
import random
import re

from propgraph.client import MockChatClient
from propgraph.model import (
    Chunk,
    EntityNode,
    KnowledgeGraph,
    Proposition,
    Quadruplet,
    chunk_id_for,
    proposition_id_for,
    quadruplet_id_for,
)
from propgraph.text import count_tokens


def add_fact(graph: KnowledgeGraph, chunk: Chunk, ordinal: int, text: str, triplets, quad_start: int = 0) -> int:
    prop_id = proposition_id_for(chunk.chunk_id, ordinal)
    graph.add_proposition(Proposition(prop_id, text, chunk.chunk_id))
    for j, (h, r, t) in enumerate(triplets):
        src = graph.merge_entity(EntityNode(h))
        dst = graph.merge_entity(EntityNode(t))
        graph.add_quadruplet(
            Quadruplet(quadruplet_id_for(chunk.chunk_id, quad_start + j), src, r, dst, prop_id, chunk.chunk_id)
        )
    return quad_start + len(triplets)


def make_chunk(doc_id: str, index: int, text: str) -> Chunk:
    return Chunk(chunk_id_for(doc_id, index), doc_id, index, text, count_tokens(text))


def graph_from_triplets(triplets, doc_id: str = "d0", freeze: bool = True) -> KnowledgeGraph:
    """One chunk per triplet; each triplet is its own proposition."""
    graph = KnowledgeGraph()
    for i, (h, r, t) in enumerate(triplets):
        chunk = make_chunk(doc_id, i, f"{h} {r} {t}.")
        graph.add_chunk(chunk)
        add_fact(graph, chunk, 0, f"{h} {r} {t}.", [(h, r, t)])
    return graph.freeze() if freeze else graph


def random_bipartite(rng: random.Random, n_entities: int, n_props: int, max_arity: int = 3) -> KnowledgeGraph:
    """Random graph: every proposition links 1..max_arity distinct entities ``ent<i>``."""
    graph = KnowledgeGraph()
    names = [f"ent{i}" for i in range(n_entities)]
    for name in names:
        graph.merge_entity(EntityNode(name))
    per_chunk = 4
    for p in range(n_props):
        if p % per_chunk == 0:
            idx = p // per_chunk
            chunk = make_chunk("rand", idx, f"chunk {idx} " + " ".join(rng.choice(names) for _ in range(3)))
            graph.add_chunk(chunk)
        chunk = graph.chunks[chunk_id_for("rand", p // per_chunk)]
        ents = rng.sample(names, rng.randint(1, min(max_arity, n_entities)))
        if len(ents) == 1:
            trips = [(ents[0], f"rel{p}", ents[0])]
        else:
            trips = [(ents[0], f"rel{p}", e) for e in ents[1:]]
        add_fact(graph, chunk, p % per_chunk, f"fact {p} about " + " and ".join(ents), trips, quad_start=(p % per_chunk) * 10)
    return graph.freeze()


# -- scripted pipeline mocks ----------------------------------------------

_PARA_RE = re.compile(r"Paragraph:\s*(.*?)\n(?:Entities:|Output:)", re.DOTALL)
_DOC_RE = re.compile(r"Document:\s*(.*?)\nOutput:", re.DOTALL)


def prompt_paragraph(prompt: str) -> str:
    """The payload paragraph of an extraction or decontextualization prompt (last occurrence)."""
    return _PARA_RE.findall(prompt)[-1].strip()


def prompt_document(prompt: str) -> str:
    return _DOC_RE.findall(prompt)[-1].strip()


def first_word_entities(text: str) -> list[str]:
    """Capitalized tokens, in order, deduplicated."""
    seen: list[str] = []
    for w in re.findall(r"\b[A-Z][a-z]+\b", text):
        if w not in seen:
            seen.append(w)
    return seen


def counting_pipeline_mock(facts_per_chunk: int = 2, triplets_per_fact: int = 2, **kwargs) -> MockChatClient:
    """Multi-step mock: echo rewrites, entities from a paragraph digest, fixed facts per chunk.

    Fact texts and entity names are derived from the paragraph so different
    chunks yield distinct propositions.
    """

    def tag(prompt: str) -> str:
        para = prompt_paragraph(prompt)
        return "Ent" + hashlib.sha1(para.encode()).hexdigest()[:8]

    def entities(prompt: str) -> str:
        return json.dumps({"n1": {"name": tag(prompt), "type": "Thing"}})

    def relations(prompt: str) -> str:
        t = tag(prompt)
        out = {}
        for f in range(facts_per_chunk):
            out[f"f{f + 1}"] = {
                "fact": f"{t} fact number {f}.",
                "triplets": [[t, f"rel{f}_{j}", f"Obj{f}_{j}_{t}"] for j in range(triplets_per_fact)],
            }
        return json.dumps(out)

    return MockChatClient(
        rules=[
            (r"Rewrite the below paragraph", lambda p: prompt_paragraph(p)),
            (r"Extract all named entities", entities),
            (r"Extract all facts from the document\. For each fact.*Entities:", relations),
        ],
        **kwargs,
    )


def brute_cosine(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb) if na * nb else 0.0


def brute_rank(ids, vectors, query, m):
    """Exhaustive cosine ranking: descending score, ties by id."""
    scored = [(i, brute_cosine(v, query)) for i, v in zip(ids, vectors)]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored[:m]
