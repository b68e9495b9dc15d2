"""Baseline segment-act tagger: hashed n-gram features and a softmax classifier.

Features per segment are word unigrams and bigrams (punctuation kept as
tokens), the segment's position within its utterance and the speaker. Each
feature is hashed into a fixed-size space with a sign bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import ACTS, NUM_ACTS, Corpus, Dialogue, Segment, SegmentAct, Utterance

log = logging.getLogger(__name__)

FEATURE_SPEC = "uni+bi+segpos+speaker/v1"
TAGGER_FORMAT = "actflow-tagger-v1"
_TOKEN = re.compile(r"[^\W_]+(?:'[^\W_]+)?|[?!.,]", re.UNICODE)


@dataclass(frozen=True)
class TaggerParams:
    dim: int = 2**18
    epochs: int = 8
    learning_rate: float = 0.2
    l2: float = 1e-6
    seed: int = 0


@dataclass
class TaggerModel:
    weights: np.ndarray  # (NUM_ACTS, dim)
    bias: np.ndarray  # (NUM_ACTS,)
    feature_spec: str = FEATURE_SPEC
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])


def _hash(feature: str, dim: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")
    return (h >> 1) % dim, (1.0 if h & 1 else -1.0)


def segment_features(text: str, segment_index: int, speaker: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Hashed feature indices (unique, sorted) and their summed signed values."""
    toks = ["<s>"] + _TOKEN.findall(text.lower()) + ["</s>"]
    feats = [f"u:{t}" for t in toks[1:-1]]
    feats += [f"b:{a}|{b}" for a, b in zip(toks, toks[1:])]
    feats.append(f"pos:{min(segment_index, 3)}")
    feats.append(f"spk:{speaker % 2}")
    feats.append("bias")
    acc: dict[int, float] = {}
    for f in feats:
        i, s = _hash(f, dim)
        acc[i] = acc.get(i, 0.0) + s
    idx = np.array(sorted(acc), dtype=np.int64)
    return idx, np.array([acc[i] for i in idx], dtype=np.float64)


def _examples(corpus: Iterable[Dialogue], dim: int, need_labels: bool = True):
    out = []
    for d in corpus:
        for speaker, j, seg in d.iter_segments():
            if seg.act is None:
                if need_labels:
                    raise ValueError(f"unlabeled segment in dialogue {d.id!r}: {seg.text!r}")
                continue
            idx, val = segment_features(seg.text, j, speaker, dim)
            out.append((idx, val, seg.act.index))
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def train_tagger(corpus: Corpus | Iterable[Dialogue], params: TaggerParams = TaggerParams()) -> TaggerModel:
    examples = _examples(corpus, params.dim)
    if not examples:
        raise ValueError("empty corpus")
    labels = {y for _, _, y in examples}
    W = np.zeros((NUM_ACTS, params.dim))
    b = np.zeros(NUM_ACTS)
    if len(labels) < 2:
        (only,) = labels
        warnings.warn(f"single-label corpus; returning a constant {ACTS[only].value!r} tagger", stacklevel=2)
        b[only] = 1.0
        return TaggerModel(W, b)

    rng = np.random.default_rng(params.seed)
    t = 0
    model = TaggerModel(W, b)
    for epoch in range(params.epochs):
        total = 0.0
        for k in rng.permutation(len(examples)):
            idx, val, y = examples[k]
            lr = params.learning_rate / (1.0 + 1e-4 * t)
            p = _softmax(W[:, idx] @ val + b)
            total -= float(np.log(max(p[y], 1e-300)))
            p[y] -= 1.0
            W[:, idx] -= lr * (np.outer(p, val) + params.l2 * W[:, idx])
            b -= lr * p
            t += 1
        model.loss_history.append(total / len(examples))
        log.info("stage=train-tagger epoch=%d loss=%.5f", epoch + 1, model.loss_history[-1])
    return model


def tag_distribution(model: TaggerModel, text: str, segment_index: int = 0, speaker: int = 0) -> np.ndarray:
    if not text or not text.strip():
        raise ValueError("cannot tag an empty segment")
    idx, val = segment_features(text, segment_index, speaker, model.dim)
    return _softmax(model.weights[:, idx] @ val + model.bias)


def tag_segment(model: TaggerModel, text: str, segment_index: int = 0, speaker: int = 0) -> tuple[SegmentAct, np.ndarray]:
    dist = tag_distribution(model, text, segment_index, speaker)
    # np.argmax picks the first maximum, i.e. the earliest label in tagset order
    return ACTS[int(np.argmax(dist))], dist


def tag_dialogue(model: TaggerModel, d: Dialogue, overwrite: bool = False) -> Dialogue:
    utts = []
    for u in d.utterances:
        segs = []
        for j, s in enumerate(u.segments):
            if s.act is None or overwrite:
                act, dist = tag_segment(model, s.text, j, u.speaker)
                s = Segment(s.text, act, float(dist[act.index]))
            segs.append(s)
        utts.append(Utterance(u.speaker, tuple(segs)))
    return replace(d, utterances=tuple(utts))


def tag_corpus(model: TaggerModel, corpus: Corpus, overwrite: bool = False) -> Corpus:
    return Corpus(tuple(tag_dialogue(model, d, overwrite) for d in corpus), corpus.role)


def tagger_accuracy(model: TaggerModel, corpus: Corpus | Iterable[Dialogue]) -> float:
    correct = total = 0
    for d in corpus:
        for speaker, j, seg in d.iter_segments():
            if seg.act is None:
                raise ValueError(f"unlabeled segment in dialogue {d.id!r}")
            pred, _ = tag_segment(model, seg.text, j, speaker)
            correct += pred == seg.act
            total += 1
    if total == 0:
        raise ValueError("empty corpus")
    return correct / total


def save_tagger(model: TaggerModel, path: str | Path) -> None:
    meta = {"format": TAGGER_FORMAT, "feature_spec": model.feature_spec, "loss_history": model.loss_history}
    # weights are mostly zero; store only touched columns
    cols = np.flatnonzero(np.any(model.weights != 0, axis=0))
    with Path(path).open("wb") as fh:
        np.savez(
            fh,
            __meta__=np.array(json.dumps(meta)),
            dim=np.array(model.dim),
            cols=cols,
            values=model.weights[:, cols],
            bias=model.bias,
        )


def load_tagger(path: str | Path) -> TaggerModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != TAGGER_FORMAT:
            raise ValueError(f"{path}: not a tagger checkpoint")
        W = np.zeros((NUM_ACTS, int(z["dim"])))
        W[:, z["cols"]] = z["values"]
        return TaggerModel(W, z["bias"].copy(), meta["feature_spec"], list(meta["loss_history"]))
