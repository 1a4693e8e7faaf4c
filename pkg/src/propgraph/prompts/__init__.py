"""Versioned prompt templates.

Templates are plain text with ``{name}`` slots. Rendering substitutes only the
named slots, so the JSON examples embedded in the templates are left alone.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

PROMPT_VERSION = "1"

NAMES = (
    "decontextualize",
    "entities",
    "relations",
    "single_step",
    "rerank",
    "question_entities",
    "triplet_chain",
    "triplet_answer",
    "chunk_answer",
    "proxy_triplet",
    "decompose_question",
)


@lru_cache(maxsize=None)
def load(name: str) -> str:
    if name not in NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render(name: str, **slots: str) -> str:
    text = load(name)
    for key, value in slots.items():
        marker = "{" + key + "}"
        if marker not in text:
            raise KeyError(f"template {name!r} has no slot {key!r}")
        text = text.replace(marker, value)
    return text
