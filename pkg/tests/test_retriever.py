from __future__ import annotations

import random

import networkx as nx
import pytest

from propgraph.client import FailingChat, HashingEmbedder, MockChatClient
from propgraph.model import KnowledgeGraph
from propgraph.retriever import (
    DecompositionError,
    TripletQuery,
    answer_with_context,
    bfs_propositions,
    chain_of_triplet_retrieve,
    chain_result,
    decompose_to_triplet_chain,
    dense_retrieve,
    extract_question_entities,
    graph_llm_retrieve,
    graph_retrieve,
    llm_question_entities,
    llm_rerank,
    parse_indices,
    render_paths,
)
from propgraph.store import IndexedGraph

from helpers import brute_rank, graph_from_triplets, random_bipartite


def indexed(graph: KnowledgeGraph, dim: int = 256) -> tuple[IndexedGraph, HashingEmbedder]:
    emb = HashingEmbedder(dim)
    return IndexedGraph.build(graph, emb), emb


def bfs_oracle(graph: KnowledgeGraph, candidates, starts, n_hops) -> set[str]:
    g = nx.Graph()
    for q in graph.quadruplets:
        if q.prop_id in candidates:
            g.add_edge(("e", q.source), ("p", q.prop_id))
            g.add_edge(("e", q.target), ("p", q.prop_id))
    sources = {("e", s) for s in starts if ("e", s) in g}
    if not sources:
        return set()
    dist = nx.multi_source_dijkstra_path_length(g, sources, cutoff=n_hops)
    return {node for kind, node in dist if kind == "p"}


class TestQuestionEntities:
    def test_exact_mention(self):
        g = graph_from_triplets([("Eli Lilly", "makes", "Mounjaro")])
        assert extract_question_entities("Who founded Eli Lilly?", g) == [g.entity_by_name("Eli Lilly").entity_id]

    def test_longest_match(self):
        g = graph_from_triplets([("John", "knows", "Mary"), ("John Doe", "knows", "Mary")])
        assert extract_question_entities("Where does john doe live?", g) == [g.entity_by_name("John Doe").entity_id]

    def test_none_and_word_boundaries(self):
        g = graph_from_triplets([("Ann", "r", "Bo")])
        assert extract_question_entities("Nothing relevant here", g) == []
        assert extract_question_entities("Annual report about Bob", g) == []

    def test_order_of_appearance(self):
        g = graph_from_triplets([("Alpha", "r", "Beta")])
        ids = extract_question_entities("Is Beta related to Alpha?", g)
        assert [g.entities[i].name for i in ids] == ["Beta", "Alpha"]

    def test_llm_variant(self):
        g = graph_from_triplets([("Alpha", "r", "Beta")])
        chat = MockChatClient(default="- Beta\nUnknown Thing\n")
        assert llm_question_entities("q", g, chat) == [g.entity_by_name("Beta").entity_id]


class TestDense:
    def test_exact_text_ranks_first(self):
        g = graph_from_triplets([(f"E{i}", "links", f"F{i}") for i in range(10)])
        ig, emb = indexed(g)
        target = g.chunks_of("d0")[4]
        res = dense_retrieve(target.text, ig, emb, k=3)
        assert res.chunk_ids[0] == target.chunk_id
        assert res.ranked_chunks[0][1] == pytest.approx(1.0)

    def test_matches_oracle_and_k_cap(self):
        g = graph_from_triplets([(f"E{i}", "links", f"F{i % 3}") for i in range(10)])
        ig, emb = indexed(g, 32)
        chunks = sorted(g.chunks.values(), key=lambda c: c.chunk_id)
        q = "E3 links F0 and F1"
        res = dense_retrieve(q, ig, emb, k=3)
        want = brute_rank([c.chunk_id for c in chunks], [c.embedding for c in chunks], emb.embed([q])[0], 3)
        assert res.chunk_ids == [i for i, _ in want]
        assert len(dense_retrieve(q, ig, emb, k=50).ranked_chunks) == 10


class TestBfs:
    def test_chain(self):
        g = graph_from_triplets([("A", "r", "B"), ("B", "s", "C")])
        ig, emb = indexed(g)
        by_chunk = {g.chunks[p.chunk_id].index: p.prop_id for p in g.propositions.values()}
        p1, p2 = by_chunk[0], by_chunk[1]
        res3 = graph_retrieve("Tell me about A", ig, emb, n_hops=3)
        res1 = graph_retrieve("Tell me about A", ig, emb, n_hops=1)
        assert set(res3.selected_props) == {p1, p2}
        assert res1.selected_props == [p1]
        assert res3.trace["kept"] == {p1: 1, p2: 3}
        a = g.entity_by_name("A").entity_id
        assert all(path[0] == a for path in res3.hop_paths)

    def test_single_quadruplet(self):
        g = graph_from_triplets([("A", "r", "B")])
        ig, emb = indexed(g)
        (p1,) = g.propositions
        for n in (1, 2, 5):
            assert graph_retrieve("A?", ig, emb, n_hops=n).selected_props == [p1]

    def test_disconnected_similar_proposition_excluded(self):
        g = graph_from_triplets([("Alpha", "founded", "Beta"), ("Gamma", "founded company", "Delta")])
        ig, emb = indexed(g)
        res = graph_retrieve("Who founded Alpha company?", ig, emb)
        alpha_prop = next(p for p in g.propositions.values() if "Alpha" in p.text).prop_id
        gamma_prop = next(p for p in g.propositions.values() if "Gamma" in p.text).prop_id
        assert gamma_prop in [p for p, _ in res.trace["candidates"]]
        assert res.selected_props == [alpha_prop]
        assert len(res.ranked_chunks) == 1

    def test_fallback_without_entities(self):
        g = graph_from_triplets([("Alpha", "r", "Beta"), ("Gamma", "s", "Delta")])
        ig, emb = indexed(g)
        res = graph_retrieve("nothing matches", ig, emb)
        assert res.trace["fallback_no_entities"]
        assert len(res.selected_props) == 2 and res.hop_paths == []

    def test_matches_networkx_oracle(self):
        rng = random.Random(11)
        for _ in range(30):
            g = random_bipartite(rng, rng.randint(2, 20), rng.randint(1, 30))
            props = sorted(g.propositions)
            cands = rng.sample(props, rng.randint(1, len(props)))
            starts = rng.sample(sorted(g.entities), rng.randint(1, 3))
            for n in (1, 2, 5):
                kept = bfs_propositions(g, cands, starts, n)
                assert set(kept) == bfs_oracle(g, set(cands), starts, n)
                for prop, path in kept.items():
                    assert path[0] in starts and path[-1] == prop
                    for a, b in zip(path, path[1:]):
                        kind = "entity" if a in g.entities else "proposition"
                        assert b in g.neighbors(a, kind)


def hub_graph():
    # every triplet shares "Hub", so all propositions stay within 1 hop
    return graph_from_triplets([("Hub", f"rel{i}", f"Spoke{i} " + "x " * i) for i in range(6)])


class TestRerank:
    def test_parse(self):
        assert parse_indices("2,1", 3) == [1, 0]
        assert parse_indices("I think none of them", 3) is None
        assert parse_indices("1,7", 3) == [0]
        assert parse_indices("3, 3, 1", 3) == [2, 0]

    def test_llm_rerank_orders(self):
        g = hub_graph()
        props = sorted(g.propositions)[:3]
        assert llm_rerank("q", props, g, MockChatClient(default="2,1")) == [props[1], props[0]]
        assert llm_rerank("q", props, g, MockChatClient(default="prose only")) == []
        assert llm_rerank("q", props, g, MockChatClient(default="1,7")) == [props[0]]
        chat = MockChatClient(default="1")
        llm_rerank("Which?", props, g, chat)
        assert f"1. {g.propositions[props[0]].text}" in chat.prompts[0]

    def test_promote_rank_five(self):
        g = hub_graph()
        ig, emb = indexed(g)
        q = "What does Hub relate to?"
        base = graph_retrieve(q, ig, emb)
        assert len(base.ranked_chunks) == 6
        fifth = base.chunk_ids[4]
        idx = next(i for i, p in enumerate(base.selected_props, 1) if g.propositions[p].chunk_id == fifth)
        res = graph_llm_retrieve(q, ig, emb, MockChatClient(default=str(idx)), k=10)
        assert res.chunk_ids == [fifth] + [c for c in base.chunk_ids if c != fifth]
        assert res.mode == "graph_llm"

    def test_fixpoint_and_empty(self):
        g = hub_graph()
        ig, emb = indexed(g)
        q = "What does Hub relate to?"
        base = graph_retrieve(q, ig, emb)
        top = base.chunk_ids[0]
        idx = next(i for i, p in enumerate(base.selected_props, 1) if g.propositions[p].chunk_id == top)
        assert graph_llm_retrieve(q, ig, emb, MockChatClient(default=str(idx))).ranked_chunks == base.ranked_chunks
        empty = graph_llm_retrieve(q, ig, emb, MockChatClient(default="NONE"))
        assert empty.ranked_chunks == base.ranked_chunks and empty.selected_props == base.selected_props

    def test_client_failure_degrades(self):
        g = hub_graph()
        ig, emb = indexed(g)
        base = graph_retrieve("Hub?", ig, emb)
        res = graph_llm_retrieve("Hub?", ig, emb, FailingChat())
        assert res.ranked_chunks == base.ranked_chunks and "error" in res.trace["rerank"]


HAMPTON_REPLY = "Hampton Del Ruth || was born on || #1\nTed Kotcheff || was born on || #2\n"
SUFFOLK_REPLY = "Suffolk Traction Company || served || #1\n#1 || is located in || #2"


class TestChain:
    def test_decompose_examples(self):
        chain = decompose_to_triplet_chain("Who is older, Hampton Del Ruth or Ted Kotcheff?", MockChatClient(default=HAMPTON_REPLY))
        assert [t.parts for t in chain] == [
            ("Hampton Del Ruth", "was born on", "#1"),
            ("Ted Kotcheff", "was born on", "#2"),
        ]
        chain = decompose_to_triplet_chain("In what town ...?", MockChatClient(default=SUFFOLK_REPLY))
        assert [t.parts for t in chain] == [("Suffolk Traction Company", "served", "#1"), ("#1", "is located in", "#2")]
        assert [t.position for t in chain] == [0, 1]

    def test_malformed_reply(self):
        with pytest.raises(DecompositionError):
            decompose_to_triplet_chain("q?", MockChatClient(default="I cannot decompose this."))

    def test_placeholder_validation(self):
        with pytest.raises(ValueError):
            TripletQuery("#1", "#2", "#3", 0)
        with pytest.raises(ValueError):
            TripletQuery("#x", "r", "t", 0)

    def test_substitution_trace(self):
        g = graph_from_triplets(
            [
                ("Suffolk Traction Company", "served", "Holtsville"),
                ("Holtsville", "is located in", "Brookhaven"),
                ("Long Island Rail Road", "served", "Ronkonkoma"),
                ("Ronkonkoma", "is a hamlet in", "Islip"),
            ]
        )
        ig, emb = indexed(g)
        out = chain_of_triplet_retrieve("In what town ...?", ig, emb, MockChatClient(default=SUFFOLK_REPLY))
        assert out.resolved_queries[1] == ("Holtsville", "is located in", "#2")
        assert out.bindings == {"#1": "Holtsville", "#2": "Brookhaven"}
        assert out.unresolved == []
        res = chain_result(out, ig, k=10, query_id="q")
        assert len(res.ranked_chunks) == 4 and res.mode == "chain_of_triplet"

    def test_no_placeholder_matches_oracle(self):
        g = graph_from_triplets([(f"E{i}", f"r{i % 4}", f"F{i % 5}") for i in range(30)])
        ig, emb = indexed(g, 64)
        chain = [TripletQuery("E3", "r3", "F2", 0)]
        out = chain_of_triplet_retrieve("q", ig, emb, MockChatClient(), per_query=20, chain=chain)
        quads = sorted(g.quadruplets, key=lambda q: q.quad_id)
        want = brute_rank([q.quad_id for q in quads], [q.embedding for q in quads], emb.embed(["E3 | r3 | F2"])[0], 20)
        assert [i for i, _ in out.retrieved[0]] == [i for i, _ in want]

    def test_empty_graph(self):
        ig, emb = indexed(KnowledgeGraph().freeze())
        out = chain_of_triplet_retrieve("q", ig, emb, MockChatClient(default=SUFFOLK_REPLY))
        assert out.retrieved == [[], []]
        assert out.unresolved == ["#1", "#2"]


class TestAnswer:
    def test_fixed_answer(self):
        assert answer_with_context("q", MockChatClient(default=" Paris \n"), chunks=["ctx"]) == "Paris"

    def test_triplet_prompt_sections(self):
        chat = MockChatClient(default="x")
        answer_with_context(
            "Who?",
            chat,
            "triplets",
            chain=[TripletQuery("A", "r", "#1", 0)],
            triplets=["A | r | B"],
            facts=["A r B."],
        )
        prompt = chat.prompts[0]
        for section, content in (
            ("Question Triplets Chain:", "A || r || #1"),
            ("Retrieved Triplets:", "A | r | B"),
            ("Retrieved Facts:", "A r B."),
        ):
            assert f"{section}\n{content}" in prompt
        assert prompt.rstrip().endswith("Short Answer no more than 3 words:")

    def test_empty_context(self):
        chat = MockChatClient(default="unknown")
        with pytest.raises(ValueError):
            answer_with_context("q", chat)
        assert answer_with_context("q", chat, allow_empty=True) == "unknown"
        assert chat.calls == 1

    def test_paths_rendered(self):
        g = graph_from_triplets([("A", "r", "B"), ("B", "s", "C")])
        ig, emb = indexed(g)
        res = graph_retrieve("A?", ig, emb)
        lines = render_paths(g, res.hop_paths, max_hops=2)
        assert lines == ["A -> [A r B.]"]
        chat = MockChatClient(default="B")
        answer_with_context("A?", chat, chunks=["A r B."], paths=lines)
        assert "Knowledge graph paths:\nA -> [A r B.]" in chat.prompts[0]
