from __future__ import annotations

import hashlib
import json
import random

import numpy as np
import pytest

from propgraph.client import HashingEmbedder
from propgraph.model import GraphError, KnowledgeGraph
from propgraph.store import (
    META_FILE,
    CorruptStoreError,
    IndexedGraph,
    InvalidQueryError,
    StoreError,
    VectorIndex,
    VersionError,
    build_vector_index,
    load,
    save,
    top_m,
)

from helpers import brute_rank, graph_from_triplets, random_bipartite


def dir_digest(path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class TestVectorIndex:
    def test_exact_match_first(self):
        rng = np.random.default_rng(0)
        vecs = rng.normal(size=(20, 8))
        idx = VectorIndex([f"p{i:02d}" for i in range(20)], vecs)
        (best, score), *_ = top_m(idx, vecs[7], 3)
        assert best == "p07" and score == pytest.approx(1.0)

    def test_m_larger_than_index(self):
        idx = VectorIndex(["a", "b"], np.eye(2))
        assert [i for i, _ in idx.top_m(np.array([1.0, 0.0]), 10)] == ["a", "b"]

    def test_ties_break_by_id(self):
        idx = VectorIndex(["z", "a", "m"], np.ones((3, 2)))
        assert [i for i, _ in idx.top_m(np.array([1.0, 1.0]), 3)] == ["a", "m", "z"]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        vecs = rng.integers(-2, 3, size=(100, 6)).astype(float)
        ids = [f"id{i:03d}" for i in range(100)]
        idx = VectorIndex(ids, vecs)
        for _ in range(20):
            q = rng.integers(-2, 3, size=6).astype(float)
            got = idx.top_m(q, 10)
            want = brute_rank(ids, vecs.tolist(), q.tolist(), 10)
            assert [i for i, _ in got] == [i for i, _ in want]
            assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)

    def test_bad_queries(self):
        idx = VectorIndex(["a"], np.ones((1, 3)))
        with pytest.raises(InvalidQueryError):
            idx.top_m(np.ones(2), 1)
        with pytest.raises(InvalidQueryError):
            idx.top_m(np.ones(3), 0)

    def test_empty(self):
        idx = VectorIndex([], [], dim=4)
        assert len(idx) == 0 and idx.top_m(np.ones(4), 3) == []


class TestIndexBuilding:
    def test_empty_graph(self):
        idx = build_vector_index(KnowledgeGraph().freeze(), HashingEmbedder())
        assert len(idx) == 0

    def test_size_and_dim(self):
        g = random_bipartite(random.Random(2), 20, 50)
        idx = build_vector_index(g, HashingEmbedder(64))
        assert len(idx) == 50 and idx.dim == 64

    def test_cache_means_zero_calls(self):
        g = random_bipartite(random.Random(2), 10, 12)
        emb = HashingEmbedder()
        IndexedGraph.build(g, emb)
        assert emb.calls > 0
        again = HashingEmbedder()
        IndexedGraph.build(g, again)
        assert again.calls == 0

    def test_unfrozen_rejected(self):
        with pytest.raises(GraphError):
            build_vector_index(KnowledgeGraph(), HashingEmbedder())

    def test_embed_failure_names_ids(self):
        g = graph_from_triplets([("A", "r", "B")])
        with pytest.raises(GraphError, match="p_"):
            build_vector_index(g, HashingEmbedder(max_batch=0))


class TestPersistence:
    def test_round_trip_with_vectors(self, tmp_path):
        g = random_bipartite(random.Random(4), 12, 20)
        IndexedGraph.build(g, HashingEmbedder(32))
        save(g, tmp_path / "s", "fp123")
        back = load(tmp_path / "s")
        assert back == g and back.frozen
        for pid, prop in g.propositions.items():
            assert np.allclose(back.propositions[pid].embedding, prop.embedding, atol=1e-6)
        meta = json.loads((tmp_path / "s" / META_FILE).read_text())
        assert meta["config_fingerprint"] == "fp123"
        assert meta["vectors"] == ["proposition", "chunk", "triplet"]
        emb = HashingEmbedder(32)
        IndexedGraph.build(back, emb)
        assert emb.calls == 0

    def test_saves_are_byte_identical(self, tmp_path):
        g = random_bipartite(random.Random(4), 12, 20)
        save(g, tmp_path / "a")
        save(g, tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")
        save(load(tmp_path / "a"), tmp_path / "c")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "c")

    def test_dangling_prop_id(self, tmp_path):
        g = graph_from_triplets([("A", "r", "B"), ("B", "s", "C")])
        root = save(g, tmp_path / "s")
        path = root / "quadruplets.jsonl"
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        rec["prop_id"] = "p_doesnotexist"
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorruptStoreError) as info:
            load(root)
        assert info.value.record == "quadruplets.jsonl:2"
        assert "p_doesnotexist" in str(info.value)

    def test_invalid_json_line(self, tmp_path):
        root = save(graph_from_triplets([("A", "r", "B")]), tmp_path / "s")
        with open(root / "entities.jsonl", "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(CorruptStoreError, match=r"entities.jsonl:3"):
            load(root)

    def test_missing_field(self, tmp_path):
        root = save(graph_from_triplets([("A", "r", "B")]), tmp_path / "s")
        path = root / "propositions.jsonl"
        rec = json.loads(path.read_text())
        del rec["text"]
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(CorruptStoreError, match=r"propositions.jsonl:1"):
            load(root)

    def test_version_mismatch(self, tmp_path):
        root = save(graph_from_triplets([("A", "r", "B")]), tmp_path / "s")
        meta = json.loads((root / META_FILE).read_text())
        meta["schema_version"] = 99
        (root / META_FILE).write_text(json.dumps(meta))
        with pytest.raises(VersionError):
            load(root)

    def test_truncated_vectors(self, tmp_path):
        g = graph_from_triplets([("A", "r", "B")])
        IndexedGraph.build(g, HashingEmbedder(8))
        root = save(g, tmp_path / "s")
        data = (root / "vectors.bin").read_bytes()
        (root / "vectors.bin").write_bytes(data[:-4])
        with pytest.raises(CorruptStoreError, match="vectors.bin"):
            load(root)

    def test_not_a_store(self, tmp_path):
        with pytest.raises(StoreError):
            load(tmp_path)

    def test_unfrozen_save_rejected(self, tmp_path):
        with pytest.raises(GraphError):
            save(KnowledgeGraph(), tmp_path)
