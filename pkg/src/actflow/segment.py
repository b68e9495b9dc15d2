"""Rule-based utterance segmentation.

A segment boundary follows a run of ``.``, ``!`` or ``?`` (plus any closing
quotes or brackets) when whitespace comes next, unless the token ending in
``.`` is a known abbreviation.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

ABBREVIATIONS_VERSION = 1

_BOUNDARY = re.compile(r"[.!?]+[\"')\]]*(?=\s)")


@lru_cache(maxsize=1)
def abbreviations() -> frozenset[str]:
    text = resources.files("actflow").joinpath("data/abbreviations.txt").read_text(encoding="utf-8")
    return frozenset(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


def _is_abbreviation(text: str, end: int) -> bool:
    # ``end`` indexes the terminator run; look at the word right before it
    start = end
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    word = text[start:end].lower().lstrip("\"'([")
    return bool(word) and word in abbreviations()


def segment_utterance(text: str) -> list[str]:
    if not text or not text.strip():
        raise ValueError("cannot segment an empty or all-whitespace utterance")
    segments = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        if m.group().startswith(".") and len(m.group().rstrip("\"')]")) == 1 and _is_abbreviation(text, m.start()):
            continue
        piece = text[start : m.end()].strip()
        if piece:
            segments.append(piece)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        segments.append(tail)
    return segments
