"""TF-IDF topic vectors, cosine similarity and pooled content features."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .data import Corpus, Dialogue, TokenEmbeddings

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class TfidfVocabulary:
    df: dict[str, int]
    num_docs: int

    def __post_init__(self) -> None:
        if self.num_docs < 1:
            raise ValueError("vocabulary needs at least one document")
        terms = sorted(self.df)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(terms)})
        object.__setattr__(self, "_idf", np.array([self.idf(t) for t in terms], dtype=np.float64))

    @property
    def size(self) -> int:
        return len(self.df)

    def index(self, term: str) -> int | None:
        return self._index.get(term)

    def idf(self, term: str) -> float:
        return math.log((1 + self.num_docs) / (1 + self.df[term])) + 1.0

    def digest(self) -> str:
        payload = json.dumps({"df": self.df, "num_docs": self.num_docs}, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump({"num_docs": self.num_docs, "df": self.df}, fh, sort_keys=True, ensure_ascii=False)

    @classmethod
    def load(cls, path: str | Path) -> "TfidfVocabulary":
        with Path(path).open(encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls({str(k): int(v) for k, v in raw["df"].items()}, int(raw["num_docs"]))


@dataclass(frozen=True, eq=False)
class SparseVector:
    indices: np.ndarray  # strictly increasing int64
    weights: np.ndarray  # float64
    dim: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if idx.shape != w.shape or idx.ndim != 1:
            raise ValueError("indices and weights must be 1-D arrays of equal length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("indices must be strictly increasing and within [0, dim)")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite sparse weight")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.weights
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.weights, other.weights)
        )


def build_tfidf(corpus: Corpus | Iterable[Dialogue]) -> TfidfVocabulary:
    df: Counter[str] = Counter()
    n = 0
    for d in corpus:
        df.update(set(tokenize(d.text)))
        n += 1
    if n == 0:
        raise ValueError("empty corpus")
    return TfidfVocabulary(dict(df), n)


def tfidf_vector(d: Dialogue | str, vocab: TfidfVocabulary) -> SparseVector:
    """Raw term count times smoothed idf, ``ln((1 + N) / (1 + df)) + 1``."""
    text = d if isinstance(d, str) else d.text
    counts = Counter(t for t in tokenize(text) if vocab.index(t) is not None)
    pairs = sorted((vocab.index(t), c) for t, c in counts.items())
    idx = np.array([i for i, _ in pairs], dtype=np.int64)
    tf = np.array([c for _, c in pairs], dtype=np.float64)
    return SparseVector(idx, tf * vocab._idf[idx], vocab.size)


Vector = Union[np.ndarray, SparseVector]


def _dot_sparse(a: SparseVector, b: SparseVector) -> float:
    _, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
    return float(np.dot(a.weights[ia], b.weights[ib]))


def _unit_scale(w: np.ndarray) -> np.ndarray:
    # exact power-of-two rescale so squared norms neither underflow nor overflow
    m = float(np.max(np.abs(w))) if w.size else 0.0
    if m == 0.0:
        return w
    return np.ldexp(w, -math.frexp(m)[1])


def cosine(a: Vector, b: Vector) -> float:
    """Cosine similarity clipped to [-1, 1]; zero when either norm is zero."""
    if isinstance(a, SparseVector) or isinstance(b, SparseVector):
        if not (isinstance(a, SparseVector) and isinstance(b, SparseVector)):
            raise TypeError("cannot mix sparse and dense vectors")
        if a.dim != b.dim:
            raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
        a = SparseVector(a.indices, _unit_scale(a.weights), a.dim)
        b = SparseVector(b.indices, _unit_scale(b.weights), b.dim)
        dot = _dot_sparse(a, b)
        na, nb = float(np.dot(a.weights, a.weights)), float(np.dot(b.weights, b.weights))
    else:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        a, b = _unit_scale(a), _unit_scale(b)
        dot = float(np.dot(a, b))
        na, nb = float(np.dot(a, a)), float(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    # sqrt of the product keeps cosine(x, x) exactly 1
    return max(-1.0, min(1.0, dot / math.sqrt(na * nb)))


@dataclass(frozen=True, eq=False)
class ContentFeature:
    vector: np.ndarray
    provenance: str = ""


def content_feature(e: TokenEmbeddings) -> ContentFeature:
    if len(e.tokens) == 0:
        raise ValueError(f"{e.dialogue_id}: no tokens to pool")
    return ContentFeature(e.vectors.max(axis=0), e.provenance)


def write_feature_csv(rows: Iterable[tuple[str, str, np.ndarray]], path: str | Path) -> None:
    """Rows of ``dialogue_id, kind, v_0, v_1, ...``."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dialogue_id", "kind", "values"])
        for did, kind, vec in rows:
            w.writerow([did, kind, *(repr(float(x)) for x in vec)])
