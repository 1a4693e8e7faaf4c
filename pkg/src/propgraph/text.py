"""Tokenization, sentence splitting and string normalization shared by every stage."""

from __future__ import annotations

import hashlib
import re
import string
from collections import Counter

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_WORD_RE = re.compile(r"\w+")
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")

# A boundary candidate: terminal punctuation, optional closing quotes/brackets, whitespace.
_BOUNDARY_RE = re.compile(r"[.?!][\"'”’)\]]*\s+")
_OPENERS = "\"'“‘(["

ABBREVIATIONS = frozenset(
    {
        "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "gen", "col",
        "lt", "sgt", "capt", "rev", "hon", "gov", "sen", "rep", "pres", "vs", "etc",
        "inc", "ltd", "co", "corp", "dept", "univ", "no", "vol", "fig", "approx",
        "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
        "e.g", "i.e", "u.s", "u.k", "a.m", "p.m",
    }
)


def tokenize(text: str) -> list[str]:
    """Pipeline tokenizer: words and individual punctuation marks."""
    return _TOKEN_RE.findall(text)


def count_tokens(text: str) -> int:
    return len(_TOKEN_RE.findall(text))


def words(text: str) -> list[str]:
    """Case-folded word tokens (punctuation dropped)."""
    return [w.casefold() for w in _WORD_RE.findall(text)]


def word_count(text: str) -> int:
    return len(text.split())


def normalize_name(name: str) -> str:
    """Entity merge key: trim, collapse internal whitespace, case-fold."""
    return " ".join(name.split()).casefold()


def normalize_text(text: str) -> str:
    """Case-fold, replace punctuation with spaces, collapse whitespace."""
    return " ".join(text.casefold().translate(_PUNCT_TABLE).split())


def normalize_answer(text: str) -> str:
    """Reading-comprehension answer normalization (articles removed)."""
    lowered = text.casefold().translate(_PUNCT_TABLE)
    return " ".join(_ARTICLES_RE.sub(" ", lowered).split())


def overlap_f1(reference: list[str], candidate: list[str]) -> float:
    """F1 of clipped token overlap; 0 when either side is empty."""
    if not reference or not candidate:
        return 0.0
    common = sum((Counter(reference) & Counter(candidate)).values())
    if common == 0:
        return 0.0
    precision = common / len(candidate)
    recall = common / len(reference)
    return 2 * precision * recall / (precision + recall)


def split_sentences(text: str) -> list[str]:
    """Split on ``[.?!]`` followed by whitespace and an uppercase letter or quote.

    Periods ending a known abbreviation or a single capital initial are not
    treated as boundaries.
    """
    sentences: list[str] = []
    start = 0
    for match in _BOUNDARY_RE.finditer(text):
        nxt = text[match.end() : match.end() + 1]
        if not nxt or not (nxt.isupper() or nxt in _OPENERS):
            continue
        if text[match.start()] == "." and _ends_with_abbreviation(text[start : match.start()]):
            continue
        piece = text[start : match.end()].strip()
        if piece:
            sentences.append(piece)
        start = match.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _ends_with_abbreviation(prefix: str) -> bool:
    parts = prefix.rsplit(None, 1)
    if not parts:
        return False
    last = parts[-1].lstrip("\"'(“[")
    if len(last) == 1 and last.isupper():
        return True
    return last.casefold() in ABBREVIATIONS


def stable_id(prefix: str, *parts: object) -> str:
    """Deterministic content-hash identifier."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return f"{prefix}_{hashlib.sha1(payload).hexdigest()[:16]}"
