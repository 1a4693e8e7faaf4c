"""Sentence-boundary chunking, decontextualization and ROUGE-1 drift gating."""

from __future__ import annotations

import logging
from dataclasses import replace

from . import prompts
from .client import ChatClient, ClientError, ask
from .model import Chunk, Document, chunk_id_for
from .text import count_tokens, overlap_f1, split_sentences, words

log = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 256
DEFAULT_DRIFT_THRESHOLD = 0.70


class EmptyInputError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A pipeline stage failed for a specific chunk."""

    def __init__(self, message: str, *, chunk_id: str, stage: str, raw_output: str | None = None) -> None:
        super().__init__(f"[{stage}] chunk {chunk_id}: {message}")
        self.chunk_id = chunk_id
        self.stage = stage
        self.raw_output = raw_output


def split_document(doc: Document, max_tokens: int = DEFAULT_MAX_TOKENS) -> list[Chunk]:
    """Greedily pack whole sentences into chunks of at most ``max_tokens`` tokens.

    A sentence longer than the limit becomes a chunk of its own. Chunks never
    overlap and their sentences, in order, are exactly the document's.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if not doc.text or not doc.text.strip():
        raise EmptyInputError(f"document {doc.doc_id!r} has no text")

    groups: list[tuple[list[str], int]] = []
    current: list[str] = []
    current_tokens = 0
    for sentence in split_sentences(doc.text):
        n = count_tokens(sentence)
        if current and current_tokens + n > max_tokens:
            groups.append((current, current_tokens))
            current, current_tokens = [], 0
        current.append(sentence)
        current_tokens += n
    if current:
        groups.append((current, current_tokens))

    return [
        Chunk(
            chunk_id=chunk_id_for(doc.doc_id, i),
            doc_id=doc.doc_id,
            index=i,
            text=" ".join(sentences),
            token_count=n_tokens,
        )
        for i, (sentences, n_tokens) in enumerate(groups)
    ]


def rouge1_f1(reference: str, candidate: str) -> float:
    """ROUGE-1 F1 with clipped unigram counts over case-folded words."""
    return overlap_f1(words(reference), words(candidate))


def decontextualize(
    chunk: Chunk,
    previous: Chunk,
    chat: ChatClient,
    threshold: float = DEFAULT_DRIFT_THRESHOLD,
) -> Chunk:
    """Rewrite ``chunk`` so entity mentions resolve against ``previous``.

    Returns a new chunk. A rewrite scoring below ``threshold`` against the
    original is discarded and the chunk is marked ``drift_rejected``; its
    score is kept.
    """
    if chunk.index < 1:
        raise ValueError("the first chunk of a document is never decontextualized")
    if previous.doc_id != chunk.doc_id or previous.index != chunk.index - 1:
        raise ValueError(f"chunk {previous.chunk_id} does not precede {chunk.chunk_id}")

    prompt = prompts.render("decontextualize", previous_paragraph=previous.text, paragraph=chunk.text)
    try:
        rewrite = ask(chat, prompt).strip()
    except ClientError as exc:
        raise PipelineError(str(exc), chunk_id=chunk.chunk_id, stage="decontextualize") from exc

    score = rouge1_f1(chunk.text, rewrite)
    if score < threshold:
        log.info("chunk %s rewrite drifted (ROUGE-1 F1 %.3f < %.2f); keeping original", chunk.chunk_id, score, threshold)
        return replace(chunk, decontextualized_text=None, rouge_f1=score, drift_rejected=True)
    return replace(chunk, decontextualized_text=rewrite, rouge_f1=score, drift_rejected=False)
