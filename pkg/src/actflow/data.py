"""Dialogue data model, the segment-act tagset and JSONL corpus I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Literal, Optional

import numpy as np

__all__ = [
    "SegmentAct",
    "Segment",
    "Utterance",
    "Dialogue",
    "ActFlow",
    "Corpus",
    "TokenEmbeddings",
    "CorpusError",
    "UnlabeledSegmentError",
    "load_corpus",
    "parse_corpus_lines",
    "dump_corpus",
    "dialogue_to_record",
    "dialogue_from_record",
    "act_flow",
    "validate_dialogue",
    "load_embeddings",
    "dump_embeddings",
]

CorpusRole = Literal["retrieval", "evaluation"]


class CorpusError(ValueError):
    """Raised for malformed or invalid corpus files."""


class UnlabeledSegmentError(ValueError):
    pass


class SegmentAct(str, Enum):
    """The eleven segment-act labels, in their declared order.

    The declared order doubles as the class index used by every model and as
    the tie-break order for argmax decisions.
    """

    QUESTION = "question"
    INFORM = "inform"
    DIRECTIVE = "directive"
    COMMISSIVE = "commissive"
    GREETING = "greeting"
    GOODBYE = "goodbye"
    APOLOGY = "apology"
    THANKING = "thanking"
    BACKCHANNEL_SUCCESS = "backchannel-success"
    BACKCHANNEL_FAILURE = "backchannel-failure"
    CHECK_UNDERSTANDING = "check-understanding"

    def __str__(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return _ACT_INDEX[self]

    @classmethod
    def parse(cls, text: str) -> "SegmentAct":
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown segment act {text!r}") from None

    @classmethod
    def from_index(cls, i: int) -> "SegmentAct":
        return ACTS[i]


ACTS: tuple[SegmentAct, ...] = tuple(SegmentAct)
_ACT_INDEX = {a: i for i, a in enumerate(ACTS)}
NUM_ACTS = len(ACTS)


@dataclass(frozen=True)
class Segment:
    text: str
    act: Optional[SegmentAct] = None
    confidence: Optional[float] = None


@dataclass(frozen=True)
class Utterance:
    speaker: int
    segments: tuple[Segment, ...]


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]
    rating: Optional[float] = None

    def iter_segments(self) -> Iterator[tuple[int, int, Segment]]:
        """Yield ``(speaker, index_within_utterance, segment)`` in reading order."""
        for utt in self.utterances:
            for j, seg in enumerate(utt.segments):
                yield utt.speaker, j, seg

    @property
    def num_segments(self) -> int:
        return sum(len(u.segments) for u in self.utterances)

    @property
    def text(self) -> str:
        return " ".join(seg.text for _, _, seg in self.iter_segments())

    @property
    def is_labeled(self) -> bool:
        return all(seg.act is not None for _, _, seg in self.iter_segments())


@dataclass(frozen=True)
class ActFlow:
    acts: tuple[SegmentAct, ...]
    speakers: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.acts) != len(self.speakers):
            raise ValueError("acts and speakers differ in length")
        if not self.acts:
            raise ValueError("empty act flow")

    def __len__(self) -> int:
        return len(self.acts)

    @classmethod
    def of(cls, acts: Iterable[SegmentAct | str], speakers: Iterable[int] | None = None) -> "ActFlow":
        acts = tuple(a if isinstance(a, SegmentAct) else SegmentAct.parse(a) for a in acts)
        if speakers is None:
            speakers = (0,) * len(acts)
        return cls(acts, tuple(int(s) for s in speakers))

    def indices(self) -> list[int]:
        return [a.index for a in self.acts]


@dataclass(frozen=True)
class Corpus:
    dialogues: tuple[Dialogue, ...]
    role: CorpusRole = "retrieval"

    def __post_init__(self) -> None:
        if not self.dialogues:
            raise CorpusError("empty corpus")
        seen: set[str] = set()
        for d in self.dialogues:
            if d.id in seen:
                raise CorpusError(f"duplicate dialogue id {d.id!r}")
            seen.add(d.id)

    def __len__(self) -> int:
        return len(self.dialogues)

    def __iter__(self) -> Iterator[Dialogue]:
        return iter(self.dialogues)

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.dialogues]

    def by_id(self) -> dict[str, Dialogue]:
        return {d.id: d for d in self.dialogues}


@dataclass(frozen=True, eq=False)
class TokenEmbeddings:
    """Per-token content vectors for one dialogue, produced by an external encoder."""

    dialogue_id: str
    tokens: tuple[str, ...]
    vectors: np.ndarray
    provenance: str = ""

    def __post_init__(self) -> None:
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(self.tokens):
            raise ValueError(
                f"{self.dialogue_id}: {len(self.tokens)} tokens but vectors of shape {vec.shape}"
            )
        if vec.shape[1] == 0:
            raise ValueError(f"{self.dialogue_id}: zero-dimensional vectors")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"{self.dialogue_id}: non-finite embedding entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenEmbeddings):
            return NotImplemented
        return (
            self.dialogue_id == other.dialogue_id
            and self.tokens == other.tokens
            and self.provenance == other.provenance
            and np.array_equal(self.vectors, other.vectors)
        )


def act_flow(d: Dialogue) -> ActFlow:
    acts, speakers = [], []
    for ui, utt in enumerate(d.utterances):
        for si, seg in enumerate(utt.segments):
            if seg.act is None:
                raise UnlabeledSegmentError(
                    f"unlabeled segment in dialogue {d.id!r} (utterance {ui}, segment {si}): {seg.text!r}"
                )
            acts.append(seg.act)
            speakers.append(utt.speaker)
    return ActFlow(tuple(acts), tuple(speakers))


def validate_dialogue(d: Dialogue) -> list[str]:
    """Return every invariant violation of ``d``; an empty list means valid."""
    problems = []
    if not d.id:
        problems.append("empty dialogue id")
    if not d.utterances:
        problems.append(f"{d.id}: no utterances")
    for ui, utt in enumerate(d.utterances):
        if utt.speaker not in (0, 1):
            problems.append(f"{d.id}: utterance {ui} has speaker id {utt.speaker!r} (expected 0 or 1)")
        if not utt.segments:
            problems.append(f"{d.id}: utterance {ui} has no segments")
        for si, seg in enumerate(utt.segments):
            if not seg.text or not seg.text.strip():
                problems.append(f"{d.id}: utterance {ui} segment {si} is empty")
            if seg.act is not None and not isinstance(seg.act, SegmentAct):
                problems.append(f"{d.id}: utterance {ui} segment {si} has unknown act {seg.act!r}")
    if d.rating is not None:
        if isinstance(d.rating, bool) or not isinstance(d.rating, (int, float)) or not math.isfinite(d.rating):
            problems.append(f"{d.id}: rating {d.rating!r} is not a finite real")
    return problems


# -- JSONL ------------------------------------------------------------------


def dialogue_from_record(rec: dict) -> Dialogue:
    """Build a dialogue from a decoded JSON record without validating it."""
    if not isinstance(rec, dict):
        raise CorpusError("record is not a JSON object")
    try:
        did = rec["id"]
        raw_utts = rec["utterances"]
    except KeyError as e:
        raise CorpusError(f"missing field {e.args[0]!r}") from None
    if not isinstance(did, str):
        raise CorpusError("id must be a string")
    utterances = []
    for u in raw_utts:
        segs = []
        for s in u.get("segments", []):
            act = s.get("act")
            if act is not None:
                act = SegmentAct.parse(act)
            conf = s.get("act_confidence")
            segs.append(Segment(s.get("text", ""), act, None if conf is None else float(conf)))
        utterances.append(Utterance(u.get("speaker"), tuple(segs)))
    rating = rec.get("rating")
    if isinstance(rating, str):
        # "NaN"-style sentinels are kept so validation can report them
        try:
            rating = float(rating)
        except ValueError:
            raise CorpusError(f"rating {rating!r} is not a number") from None
    return Dialogue(did, tuple(utterances), rating)


def dialogue_to_record(d: Dialogue) -> dict:
    utts = []
    for u in d.utterances:
        segs = []
        for s in u.segments:
            rec = {"text": s.text, "act": None if s.act is None else s.act.value}
            if s.confidence is not None:
                rec["act_confidence"] = s.confidence
            segs.append(rec)
        utts.append({"speaker": u.speaker, "segments": segs})
    return {"id": d.id, "rating": d.rating, "utterances": utts}


def parse_corpus_lines(lines: Iterable[str], role: CorpusRole = "retrieval", source: str = "<corpus>") -> Corpus:
    dialogues = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{source}:{lineno}: malformed JSON ({e.msg})") from None
        try:
            d = dialogue_from_record(rec)
        except (CorpusError, ValueError, AttributeError, TypeError) as e:
            raise CorpusError(f"{source}:{lineno}: {e}") from None
        problems = validate_dialogue(d)
        if problems:
            raise CorpusError(f"{source}:{lineno}: " + "; ".join(problems))
        if d.id in seen:
            raise CorpusError(f"{source}:{lineno}: duplicate id {d.id!r} (first seen on line {seen[d.id]})")
        seen[d.id] = lineno
        dialogues.append(d)
    if not dialogues:
        raise CorpusError(f"{source}: empty corpus")
    return Corpus(tuple(dialogues), role)


def load_corpus(path: str | Path, role: CorpusRole = "retrieval") -> Corpus:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_corpus_lines(fh, role, source=str(path))


def dump_corpus(corpus: Corpus | Iterable[Dialogue], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for d in corpus:
            fh.write(json.dumps(dialogue_to_record(d), ensure_ascii=False) + "\n")


def load_embeddings(path: str | Path) -> dict[str, TokenEmbeddings]:
    out: dict[str, TokenEmbeddings] = {}
    dim = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                emb = TokenEmbeddings(
                    rec["dialogue_id"],
                    tuple(rec["tokens"]),
                    np.asarray(rec["vectors"], dtype=np.float64).reshape(len(rec["tokens"]), -1),
                    rec.get("provenance", ""),
                )
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
                raise CorpusError(f"{path}:{lineno}: bad embedding record ({e})") from None
            if dim is not None and emb.dim != dim:
                raise CorpusError(f"{path}:{lineno}: dimension {emb.dim} differs from {dim}")
            if emb.dialogue_id in out:
                raise CorpusError(f"{path}:{lineno}: duplicate dialogue_id {emb.dialogue_id!r}")
            dim = emb.dim
            out[emb.dialogue_id] = emb
    return out


def dump_embeddings(embs: Iterable[TokenEmbeddings], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for e in embs:
            rec = {
                "dialogue_id": e.dialogue_id,
                "provenance": e.provenance,
                "tokens": list(e.tokens),
                "vectors": e.vectors.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
