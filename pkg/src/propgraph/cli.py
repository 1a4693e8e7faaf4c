"""Command-line entry point: build, retrieve, eval, stats, export-training-pairs.

Exit codes: 0 success, 2 usage or input error, 3 too many failed documents.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from .config import Config, ConfigError, load_config
from .evaluator import (
    ProxyGenerationError,
    answer_role,
    coverage_table,
    evaluate_coverage,
    generate_proxy_triplets,
    qa_metrics,
    qa_table,
    retrieval_metrics,
    retrieval_table,
)
from .extraction import ExtractionLog, SynthesisConfig, density_table, fact_json, synthesize_corpus
from .model import Document, GroundTruthTriplet
from .retriever import (
    MODES,
    DecompositionError,
    RetrievalResult,
    answer_with_context,
    chain_of_triplet_retrieve,
    chain_result,
    dense_retrieve,
    graph_llm_retrieve,
    graph_retrieve,
    render_paths,
)
from .store import IndexedGraph, StoreError, load, save

log = logging.getLogger("propgraph")

MANIFEST_FILE = "build_manifest.json"
ERRORS_FILE = "extraction_errors.jsonl"


class CliError(Exception):
    def __init__(self, message: str, code: int = 2) -> None:
        super().__init__(message)
        self.code = code


# -- input helpers --------------------------------------------------------


def read_jsonl(path: str | Path, what: str) -> list[dict]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(rec, dict):
            raise CliError(f"{path}:{lineno}: expected a JSON object")
        records.append(rec)
    return records


def write_jsonl(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def write_json(path: str | Path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_corpus(path: str | Path) -> list[Document]:
    docs = []
    seen: set[str] = set()
    for rec in read_jsonl(path, "corpus"):
        doc_id, text = rec.get("doc_id"), rec.get("text")
        if not isinstance(doc_id, str) or not doc_id or not isinstance(text, str) or not text.strip():
            raise CliError(f"corpus record needs non-empty doc_id and text: {str(rec)[:80]}")
        if doc_id in seen:
            raise CliError(f"duplicate doc_id {doc_id!r} in corpus")
        seen.add(doc_id)
        meta = {str(k): str(v) for k, v in (rec.get("metadata") or {}).items()}
        docs.append(Document(doc_id, text, meta))
    if not docs:
        raise CliError(f"corpus {path} is empty")
    return docs


def read_questions(path: str | Path) -> list[dict]:
    questions = read_jsonl(path, "questions")
    seen: set[str] = set()
    for q in questions:
        qid = q.get("question_id")
        if not isinstance(qid, str) or not qid:
            raise CliError(f"question record without question_id: {str(q)[:80]}")
        if qid in seen:
            raise CliError(f"duplicate question_id {qid!r} in {path}")
        seen.add(qid)
    return questions


def build_config(args: argparse.Namespace) -> Config:
    overrides: dict[str, object] = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.mock_chat:
        overrides["chat_backend"] = "mock"
        overrides["mock_chat_fixture"] = args.mock_chat
    if args.mock_embed:
        overrides["embed_backend"] = "hashing"
    try:
        return load_config(args.config, overrides)
    except ConfigError as exc:
        raise CliError(str(exc)) from exc


def open_store(path: str, config: Config) -> tuple[IndexedGraph, object]:
    try:
        graph = load(path)
    except (StoreError, OSError) as exc:
        raise CliError(f"cannot load store {path}: {exc}") from exc
    embedder = config.embed_client()
    return IndexedGraph.build(graph, embedder), embedder


# -- commands -------------------------------------------------------------


def cmd_build(args: argparse.Namespace) -> int:
    config = build_config(args)
    docs = read_corpus(args.corpus)
    chat = config.chat_client()
    embedder = config.embed_client()
    stats = ExtractionLog()
    synth = SynthesisConfig(
        max_tokens=config.chunk_max_tokens,
        drift_threshold=config.drift_threshold,
        max_workers=config.max_concurrency,
    )
    graph, failed = synthesize_corpus(docs, chat, args.mode, synth, stats)
    IndexedGraph.build(graph, embedder)

    out = Path(args.out)
    fingerprint = config.fingerprint()
    save(graph, out, config_fingerprint=fingerprint)
    stats.write_jsonl(out / ERRORS_FILE)
    manifest = {
        "mode": args.mode,
        "config_fingerprint": fingerprint,
        "documents": len(docs),
        "documents_failed": sorted(failed),
        "chunks": len(graph.chunks),
        "entities": len(graph.entities),
        "propositions": len(graph.propositions),
        "triplets": len(graph.quadruplets),
        "triplets_dedup": len(graph.dedup_quadruplets()),
        "chunk_errors": len(stats.failures),
        "empty_kg_documents": sorted(stats.empty_kg_docs),
        "counters": dict(sorted(stats.counters.items())),
    }
    write_json(out / MANIFEST_FILE, manifest)
    print(
        f"built {out}: {len(docs)} documents, {manifest['triplets']} triplets, "
        f"{len(failed)} failed documents, {len(stats.failures)} extraction errors"
    )
    if len(failed) / len(docs) > config.max_failed_fraction:
        print(f"error: {len(failed)}/{len(docs)} documents failed", file=sys.stderr)
        return 3
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    if args.mode not in MODES:
        raise CliError(f"unknown mode {args.mode!r}; choose from {', '.join(MODES)}")
    config = build_config(args)
    k = args.k or config.k
    m = args.m or config.m
    n_hops = args.n_hops or config.n_hops
    per_query = args.per_query or config.per_query
    questions = read_questions(args.questions)
    indexed, embedder = open_store(args.store, config)
    needs_chat = args.answer or args.mode in ("graph_llm", "chain_of_triplet")
    chat = config.chat_client() if needs_chat else None

    records, traces = [], []
    for q in questions:
        qid, text = q["question_id"], q.get("question", "")
        if not isinstance(text, str) or not text.strip():
            raise CliError(f"question {qid!r} has no question text")
        chain_out = None
        if args.mode == "dense":
            res = dense_retrieve(text, indexed, embedder, k, qid)
        elif args.mode == "graph":
            res = graph_retrieve(text, indexed, embedder, m, n_hops, k, qid)
        elif args.mode == "graph_llm":
            res = graph_llm_retrieve(text, indexed, embedder, chat, m, n_hops, k, qid)
        else:
            try:
                chain_out = chain_of_triplet_retrieve(text, indexed, embedder, chat, per_query)
                res = chain_result(chain_out, indexed, k, qid)
            except DecompositionError as exc:
                log.warning("question %s: %s", qid, exc)
                res = RetrievalResult(qid, "chain_of_triplet", trace={"error": str(exc)})
        rec = res.to_record()
        if args.answer:
            rec["answer"] = _answer(text, res, chain_out, indexed, chat, config)
        records.append(rec)
        traces.append({"query_id": qid, "mode": res.mode, **res.trace})

    write_jsonl(args.out, records)
    if args.trace:
        write_jsonl(args.trace, traces)
    print(f"wrote {len(records)} {args.mode} results to {args.out}")
    return 0


def _answer(question: str, res: RetrievalResult, chain_out, indexed: IndexedGraph, chat, config: Config) -> str:
    graph = indexed.graph
    if chain_out is not None:
        by_id = graph.quadruplets_by_id()
        return answer_with_context(
            question,
            chat,
            "triplets",
            chain=chain_out.chain,
            triplets=[graph.quadruplet_text(by_id[q]) for q in chain_out.quad_ids()],
            facts=[graph.propositions[p].text for p in chain_out.proposition_ids(graph)],
            allow_empty=True,
        )
    return answer_with_context(
        question,
        chat,
        "chunks",
        chunks=[graph.chunks[c].text for c in res.chunk_ids],
        paths=render_paths(graph, res.hop_paths, config.path_hops),
        allow_empty=True,
    )


def _results_by_id(path: str) -> list[RetrievalResult]:
    out = []
    for rec in read_jsonl(path, "results"):
        out.append(
            RetrievalResult(
                query_id=rec["query_id"],
                mode=rec.get("mode", ""),
                ranked_chunks=[(c, float(s)) for c, s in rec.get("ranked_chunks", [])],
                selected_props=rec.get("selected_props", []),
                hop_paths=rec.get("hop_paths", []),
            )
        )
    return out


def _check_ids(have: set[str], want: set[str], what: str) -> None:
    missing = sorted(want - have)
    if missing:
        raise CliError(f"{what} missing for ids: {', '.join(missing)}")


def cmd_eval(args: argparse.Namespace) -> int:
    config = build_config(args)
    gold = read_questions(args.gold)
    gold_by_id = {q["question_id"]: q for q in gold}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.task == "coverage":
        if not args.store:
            raise CliError("coverage evaluation needs --store")
        indexed, embedder = open_store(args.store, config)
        threshold = args.threshold if args.threshold is not None else config.coverage_threshold
        gts = _ground_truth(gold, config)
        report = evaluate_coverage(gts, indexed, embedder, threshold)
        table = coverage_table(report, args.label)
        write_json(out / "coverage_report.json", report.to_dict())
        name = "coverage_report"
    elif args.task == "retrieval":
        if not args.results:
            raise CliError("retrieval evaluation needs --results")
        results = _results_by_id(args.results)
        _check_ids(set(gold_by_id), {r.query_id for r in results}, "gold records")
        ks = [int(x) for x in args.ks.split(",")]
        gold_sets = {qid: q.get("supporting_chunk_ids") or [] for qid, q in gold_by_id.items()}
        metrics = retrieval_metrics(results, gold_sets, ks)
        table = retrieval_table(metrics, ks, args.label)
        write_json(out / "retrieval_report.json", {"ks": ks, "metrics": metrics})
        name = "retrieval_report"
    else:
        if not args.results:
            raise CliError("qa evaluation needs --results")
        preds = {}
        for rec in read_jsonl(args.results, "predictions"):
            pred = rec.get("answer", rec.get("prediction"))
            if "query_id" in rec or "question_id" in rec:
                preds[rec.get("query_id", rec.get("question_id"))] = pred if isinstance(pred, str) else ""
        if not preds:
            raise CliError(f"no predictions in {args.results}")
        _check_ids(set(gold_by_id), set(preds), "gold records")
        answers = {qid: q.get("answers") or [] for qid, q in gold_by_id.items()}
        _check_ids({qid for qid, a in answers.items() if a}, set(preds), "gold answers")
        metrics = qa_metrics(preds, answers)
        table = qa_table(metrics, args.label)
        write_json(out / "qa_report.json", {"metrics": metrics})
        name = "qa_report"

    (out / f"{name}.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def _ground_truth(gold: list[dict], config: Config) -> list[GroundTruthTriplet]:
    gts: list[GroundTruthTriplet] = []
    chat = None
    for q in gold:
        qid = q["question_id"]
        if q.get("triplets"):
            answers = q.get("answers") or []
            for trip in q["triplets"]:
                if len(trip) != 3 or not all(isinstance(p, str) and p.strip() for p in trip):
                    raise CliError(f"question {qid}: malformed triplet {trip!r}")
                role = next((r for a in answers if (r := answer_role(*trip, a))), "tail")
                gts.append(GroundTruthTriplet(qid, trip[0], trip[1], trip[2], role))
            continue
        answers = q.get("answers") or []
        if not answers:
            raise CliError(f"question {qid}: needs triplets or answers for coverage evaluation")
        chat = chat or config.chat_client()
        sub_qas = [tuple(p) for p in q["sub_qas"]] if q.get("sub_qas") else None
        try:
            gts.extend(generate_proxy_triplets(qid, q["question"], answers[0], chat, sub_qas, q.get("facts")))
        except ProxyGenerationError as exc:
            log.warning("%s", exc)
    if not gts:
        raise CliError("no ground-truth triplets to evaluate")
    return gts


def cmd_stats(args: argparse.Namespace) -> int:
    try:
        graph = load(args.store)
    except (StoreError, OSError) as exc:
        raise CliError(f"cannot load store {args.store}: {exc}") from exc
    docs = read_corpus(args.corpus)
    per_doc: dict[str, int] = {}
    for quad in graph.quadruplets:
        doc_id = graph.chunks[quad.chunk_id].doc_id
        per_doc[doc_id] = per_doc.get(doc_id, 0) + 1
    table = density_table(((per_doc.get(d.doc_id, 0), d) for d in docs), args.bucket_width)
    lines = ["words  triplets_per_100_words"]
    lines += [f"{bucket:>5}  {density:.2f}" for bucket, density in table.items()]
    print("\n".join(lines))
    if args.out:
        write_json(args.out, {"bucket_width": args.bucket_width, "density": {str(b): v for b, v in table.items()}})
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    try:
        graph = load(args.store)
    except (StoreError, OSError) as exc:
        raise CliError(f"cannot load store {args.store}: {exc}") from exc
    docs = read_corpus(args.corpus)
    known = set(graph.doc_ids())
    records = [
        {"doc_id": d.doc_id, "document": d.text, "kg": json.dumps(fact_json(graph, d.doc_id), ensure_ascii=False)}
        for d in docs
        if d.doc_id in known
    ]
    write_jsonl(args.out, records)
    print(f"wrote {len(records)} training pairs to {args.out}")
    return 0


# -- parser ---------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--mock-chat", metavar="FIXTURE", help="use the scripted mock chat client")
    p.add_argument("--mock-embed", action="store_true", help="use the hashed bag-of-words embedder")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propgraph", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="synthesize a KG store from a JSONL corpus")
    p.add_argument("corpus")
    p.add_argument("--out", required=True, help="store directory")
    p.add_argument("--mode", choices=("multi", "single"), default="multi")
    _common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("retrieve", help="retrieve chunks for a JSONL question file")
    p.add_argument("store")
    p.add_argument("questions")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="graph", help="dense | graph | graph_llm | chain_of_triplet")
    p.add_argument("-k", type=int)
    p.add_argument("-m", type=int)
    p.add_argument("-n", "--n-hops", type=int, dest="n_hops")
    p.add_argument("--per-query", type=int)
    p.add_argument("--trace", help="write per-query retrieval traces here")
    p.add_argument("--answer", action="store_true", help="also generate an answer per question")
    _common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="coverage, retrieval or QA evaluation")
    p.add_argument("--task", choices=("coverage", "retrieval", "qa"), required=True)
    p.add_argument("--gold", required=True, help="JSONL gold question file")
    p.add_argument("--store")
    p.add_argument("--results", help="retrieval results / predictions JSONL")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--ks", default="2,10")
    p.add_argument("--threshold", type=float)
    p.add_argument("--label", default="run")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="triplet density per document-length bucket")
    p.add_argument("store")
    p.add_argument("corpus")
    p.add_argument("--bucket-width", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export-training-pairs", help="dump (document, fact JSON) pairs")
    p.add_argument("store")
    p.add_argument("corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
