"""Reference-free dialogue evaluation by consensus over segment-act flows."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    ActFlow,
    Corpus,
    Dialogue,
    Segment,
    SegmentAct,
    TokenEmbeddings,
    Utterance,
    act_flow,
    load_corpus,
    load_embeddings,
    validate_dialogue,
)
from .segment import segment_utterance  # noqa: E402

__all__ = [
    "__version__",
    "ActFlow",
    "Corpus",
    "Dialogue",
    "Segment",
    "SegmentAct",
    "TokenEmbeddings",
    "Utterance",
    "act_flow",
    "load_corpus",
    "load_embeddings",
    "validate_dialogue",
    "segment_utterance",
]
