"""KG coverage evaluation, proxy triplet generation, and retrieval / QA metrics."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field

from . import prompts
from .client import ChatClient, EmbedClient, ask
from .model import GroundTruthTriplet
from .retriever import RetrievalResult, parse_triplet_lines
from .store import IndexedGraph, VectorIndex
from .text import normalize_answer, normalize_text, overlap_f1

log = logging.getLogger(__name__)

DEFAULT_COVERAGE_THRESHOLD = 0.88


class ProxyGenerationError(ValueError):
    pass


# -- proxy triplets -------------------------------------------------------


def parse_decomposed_pairs(raw: str) -> list[tuple[str, str]]:
    """``<sub-question>? <answer>`` lines; the answer follows the last question mark."""
    pairs = []
    for line in raw.splitlines():
        line = line.strip()
        if "?" not in line:
            continue
        q, _, a = line.rpartition("?")
        q, a = q.strip() + "?", a.strip()
        if len(q) > 1 and a:
            pairs.append((q, a))
    return pairs


def answer_role(head: str, relation: str, tail: str, answer: str) -> str | None:
    """Which of head/tail contains the normalized answer as a whole-word span."""
    needle = f" {normalize_text(answer)} "
    if needle.strip() == "":
        return None
    for role, part in (("head", head), ("tail", tail)):
        if needle in f" {normalize_text(part)} ":
            return role
    return None


def generate_proxy_triplets(
    question_id: str,
    question: str,
    answer: str,
    chat: ChatClient,
    sub_qas: Sequence[tuple[str, str]] | None = None,
    facts: Sequence[str] | None = None,
) -> list[GroundTruthTriplet]:
    """One ground-truth triplet per (sub-)question/answer pair.

    Without ``sub_qas`` the question is first decomposed with the model.
    Triplets whose head and tail both lack the answer are rejected.
    """
    if not question.strip() or not answer.strip():
        raise ValueError("question and answer must be non-empty")
    if sub_qas is None:
        raw = ask(
            chat,
            prompts.render("decompose_question", question=question, facts="\n".join(facts or ()), answer=answer),
        )
        sub_qas = parse_decomposed_pairs(raw)
        if not sub_qas:
            log.warning("question %s: decomposition produced no pairs; using the original pair", question_id)
            sub_qas = [(question, answer)]

    out: list[GroundTruthTriplet] = []
    for sub_q, sub_a in sub_qas:
        raw = ask(chat, prompts.render("proxy_triplet", question=sub_q, answer=sub_a))
        lines = parse_triplet_lines(raw)
        if not lines:
            log.warning("question %s: no triplet parsed for %r", question_id, sub_q)
            continue
        head, rel, tail = lines[0]
        role = answer_role(head, rel, tail, sub_a)
        if role is None:
            log.warning("question %s: triplet %r does not use answer %r as head or tail", question_id, lines[0], sub_a)
            continue
        out.append(GroundTruthTriplet(question_id, head, rel, tail, role))
    if not out:
        raise ProxyGenerationError(f"question {question_id}: no valid proxy triplet")
    return out


# -- coverage -------------------------------------------------------------


@dataclass
class CoverageRow:
    question_id: str
    triplet: tuple[str, str, str]
    best_match: str | None
    semantic_score: float
    covered: bool
    token_f1: float


@dataclass
class CoverageReport:
    rows: list[CoverageRow]
    threshold: float
    total_triplets: int
    total_triplets_dedup: int
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.aggregates:
            self.aggregates = summarize_coverage(self.rows, self.threshold, self.total_triplets, self.total_triplets_dedup)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "aggregates": self.aggregates,
            "rows": [asdict(r) | {"triplet": list(r.triplet)} for r in self.rows],
        }


def semantic_score(
    gt: GroundTruthTriplet, triplet_index: VectorIndex, embedder: EmbedClient
) -> tuple[float, str | None]:
    """Best cosine between the ground truth's canonical text and every KG triplet."""
    if not len(triplet_index):
        return 0.0, None
    qvec = embedder.embed([gt.canonical_text])[0]
    (quad_id, score), = triplet_index.top_m(qvec, 1)
    return score, quad_id


def coverage(rows: Sequence[CoverageRow], threshold: float = DEFAULT_COVERAGE_THRESHOLD) -> float:
    """Percentage of rows whose semantic score reaches ``threshold``."""
    if not rows:
        raise ValueError("coverage needs at least one row")
    return 100.0 * sum(r.semantic_score >= threshold for r in rows) / len(rows)


def triplet_token_f1(gt_text: str, match_text: str) -> float:
    """Token F1 between two canonical triplet strings after normalization."""
    return overlap_f1(normalize_text(gt_text).split(), normalize_text(match_text).split())


def summarize_coverage(rows: Sequence[CoverageRow], threshold: float, total: int, total_dedup: int) -> dict:
    n = len(rows)
    return {
        "ground_truth_triplets": n,
        "mean_semantic_score": sum(r.semantic_score for r in rows) / n if n else 0.0,
        "coverage": coverage(rows, threshold) if n else 0.0,
        "mean_f1": sum(r.token_f1 for r in rows) / n if n else 0.0,
        "total_triplets": total,
        "total_triplets_dedup": total_dedup,
    }


def evaluate_coverage(
    gts: Iterable[GroundTruthTriplet],
    indexed: IndexedGraph,
    embedder: EmbedClient,
    threshold: float = DEFAULT_COVERAGE_THRESHOLD,
) -> CoverageReport:
    graph = indexed.graph
    by_id = graph.quadruplets_by_id()
    rows = []
    for gt in gts:
        score, match = semantic_score(gt, indexed.triplets, embedder)
        f1 = triplet_token_f1(gt.canonical_text, graph.quadruplet_text(by_id[match])) if match else 0.0
        rows.append(
            CoverageRow(gt.question_id, (gt.head, gt.relation, gt.tail), match, score, score >= threshold, f1)
        )
    return CoverageReport(rows, threshold, len(graph.quadruplets), len(graph.dedup_quadruplets()))


# -- retrieval metrics ----------------------------------------------------


def hits_at_k(ranked: Sequence[str], gold: set[str], k: int) -> float:
    """Fraction of the gold set found in the top ``k``."""
    return len(gold.intersection(ranked[:k])) / len(gold)


def reciprocal_rank(ranked: Sequence[str], gold: set[str]) -> float:
    for i, cid in enumerate(ranked, 1):
        if cid in gold:
            return 1.0 / i
    return 0.0


def average_precision(ranked: Sequence[str], gold: set[str]) -> float:
    hits = 0
    total = 0.0
    for i, cid in enumerate(ranked, 1):
        if cid in gold:
            hits += 1
            total += hits / i
    return total / len(gold)


def retrieval_metrics(
    results: Sequence[RetrievalResult],
    gold: Mapping[str, Iterable[str]],
    ks: Sequence[int] = (2, 10),
) -> dict[str, float]:
    """Mean Hits@k (gold recall), MRR and MAP as fractions in [0, 1].

    Queries with an empty gold set are skipped with a warning.
    """
    per_query: dict[str, list[float]] = {f"hits@{k}": [] for k in ks}
    per_query["mrr"] = []
    per_query["map"] = []
    for res in results:
        if res.query_id not in gold:
            raise KeyError(f"no gold set for query {res.query_id!r}")
        gold_set = set(gold[res.query_id])
        if not gold_set:
            log.warning("query %s has an empty gold set; excluded", res.query_id)
            continue
        ranked = res.chunk_ids
        for k in ks:
            per_query[f"hits@{k}"].append(hits_at_k(ranked, gold_set, k))
        per_query["mrr"].append(reciprocal_rank(ranked, gold_set))
        per_query["map"].append(average_precision(ranked, gold_set))
    out = {name: (sum(vals) / len(vals) if vals else 0.0) for name, vals in per_query.items()}
    out["queries"] = len(per_query["mrr"])
    return out


# -- QA metrics -----------------------------------------------------------


def qa_em_f1(prediction: str, gold_answers: Sequence[str]) -> tuple[int, float]:
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    pred = normalize_answer(prediction)
    em = int(any(pred == normalize_answer(g) for g in gold_answers))
    f1 = max(overlap_f1(normalize_answer(g).split(), pred.split()) for g in gold_answers)
    return em, f1


def qa_metrics(predictions: Mapping[str, str], gold: Mapping[str, Sequence[str]]) -> dict[str, float]:
    """Mean EM and F1 (fractions) over questions present in ``predictions``."""
    ems, f1s = [], []
    for qid, pred in predictions.items():
        em, f1 = qa_em_f1(pred, gold[qid])
        ems.append(em)
        f1s.append(f1)
    n = len(ems)
    return {"em": sum(ems) / n if n else 0.0, "f1": sum(f1s) / n if n else 0.0, "questions": n}


def format_table(title: str, columns: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Aligned plain-text table; floats printed with two decimals."""
    cells = [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = [title, "  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def _fmt(v: object) -> str:
    return f"{v:.2f}" if isinstance(v, float) else str(v)


def coverage_table(report: CoverageReport, label: str = "kg") -> str:
    a = report.aggregates
    return format_table(
        "KG coverage",
        ["KG", "Triplets", "Triplets (dedup)", "Semantic Score", "Triplet Coverage", "F1"],
        [[label, a["total_triplets"], a["total_triplets_dedup"], a["mean_semantic_score"], a["coverage"], 100 * a["mean_f1"]]],
    )


def retrieval_table(metrics: Mapping[str, float], ks: Sequence[int], label: str) -> str:
    cols = ["Retriever"] + [f"Hits@{k}" for k in ks] + ["MRR", "MAP"]
    row = [label] + [100 * metrics[f"hits@{k}"] for k in ks] + [100 * metrics["mrr"], 100 * metrics["map"]]
    return format_table("Retrieval", cols, [row])


def qa_table(metrics: Mapping[str, float], label: str) -> str:
    return format_table("Multi-hop QA", ["Framework", "EM", "F1"], [[label, 100 * metrics["em"], 100 * metrics["f1"]]])

