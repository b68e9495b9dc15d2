"""Pseudo-reference index and two-channel nearest-neighbour retrieval.

Every indexed dialogue carries three features: the max-pooled act-model
hidden state, a TF-IDF topic vector and a max-pooled content embedding.
The act channel ranks candidates by

    (1 + cos(act_U, act_R)) * (1 + cos(tfidf_U, tfidf_R))

and the content channel by ``cos(content_U, content_R)``. Both channels are
exhaustive scans; ties go to the smaller dialogue id.

Features are stored as 32-bit floats. Query features are rounded the same
way so a dialogue scored against an index that contains it sees exactly its
own stored features.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .actlm import ActLmModel, act_feature, load_model, save_model
from .data import ActFlow, Corpus, Dialogue, SegmentAct, TokenEmbeddings, act_flow
from .features import SparseVector, TfidfVocabulary, content_feature, cosine, tfidf_vector

log = logging.getLogger(__name__)

INDEX_MAGIC = "actflow-index"
INDEX_FORMAT_VERSION = 1


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def rounded_embeddings(e: TokenEmbeddings) -> TokenEmbeddings:
    """Token embeddings at index storage precision."""
    return TokenEmbeddings(e.dialogue_id, e.tokens, _f32(e.vectors), e.provenance)


@dataclass(frozen=True, eq=False)
class DialogueFeatures:
    act: np.ndarray
    tfidf: SparseVector
    content: np.ndarray

    @classmethod
    def rounded(cls, act: np.ndarray, tfidf: SparseVector, content: np.ndarray) -> "DialogueFeatures":
        return cls(_f32(act), SparseVector(tfidf.indices, _f32(tfidf.weights), tfidf.dim), _f32(content))


def s_act(u: DialogueFeatures, r: DialogueFeatures) -> float:
    return (1.0 + cosine(u.act, r.act)) * (1.0 + cosine(u.tfidf, r.tfidf))


def s_content(u: DialogueFeatures, r: DialogueFeatures) -> float:
    return cosine(u.content, r.content)


@dataclass(frozen=True)
class Neighbor:
    id: str
    s_act: float
    s_content: float
    channels: tuple[str, ...]


@dataclass(frozen=True)
class NeighborSet:
    act: tuple[tuple[str, float], ...]
    content: tuple[tuple[str, float], ...]
    union: tuple[Neighbor, ...]

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.union]


@dataclass
class RetrievalIndex:
    ids: list[str]
    act: np.ndarray  # (N, d)
    tfidf: sp.csr_matrix  # (N, v)
    content: np.ndarray  # (N, d_c)
    flows: list[ActFlow]
    vocab: TfidfVocabulary
    h: int
    provenance: str = ""
    model: Optional[ActLmModel] = None
    embeddings: dict[str, TokenEmbeddings] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.ids)
        if n == 0:
            raise ValueError("empty index")
        if len(set(self.ids)) != n:
            raise ValueError("duplicate ids in index")
        if not (self.act.shape[0] == self.tfidf.shape[0] == self.content.shape[0] == len(self.flows) == n):
            raise ValueError("feature tables disagree on the number of entries")
        self._pos = {d: i for i, d in enumerate(self.ids)}
        self._id_rank = np.empty(n, dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(n)
        self.tfidf.sort_indices()
        self._act_sq = _row_dots(self.act, None)
        self._content_sq = _row_dots(self.content, None)
        self._tfidf_sq = _sparse_row_sq(self.tfidf)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, did: str) -> bool:
        return did in self._pos

    def features(self, did: str) -> DialogueFeatures:
        i = self._pos[did]
        row = self.tfidf.getrow(i)
        order = np.argsort(row.indices)
        return DialogueFeatures(
            self.act[i], SparseVector(row.indices[order], row.data[order], self.tfidf.shape[1]), self.content[i]
        )

    def flow(self, did: str) -> ActFlow:
        return self.flows[self._pos[did]]

    def query_features(self, d: Dialogue, emb: TokenEmbeddings) -> DialogueFeatures:
        if self.model is None:
            raise ValueError("index has no act model attached; cannot featurize queries")
        return dialogue_features(self.model, self.vocab, d, emb, self.h)


def dialogue_features(
    model: ActLmModel, vocab: TfidfVocabulary, d: Dialogue, emb: TokenEmbeddings, h: int
) -> DialogueFeatures:
    flow = act_flow(d)
    return DialogueFeatures.rounded(
        act_feature(model, flow, h, truncate=model.config.truncate),
        tfidf_vector(d, vocab),
        content_feature(emb).vector,
    )


def build_index(
    corpus: Corpus | Sequence[Dialogue],
    model: ActLmModel,
    vocab: TfidfVocabulary,
    embeddings: Mapping[str, TokenEmbeddings],
    h: int,
    workers: int = 1,
) -> RetrievalIndex:
    dialogues = list(corpus)
    missing = [d.id for d in dialogues if d.id not in embeddings]
    if missing:
        raise KeyError(f"missing content embeddings for: {', '.join(missing[:10])}" + (" ..." if len(missing) > 10 else ""))
    dims = {embeddings[d.id].dim for d in dialogues}
    if len(dims) > 1:
        raise ValueError(f"content embeddings have mixed dimensions {sorted(dims)}")

    def featurize(d: Dialogue) -> DialogueFeatures:
        return dialogue_features(model, vocab, d, embeddings[d.id], h)

    # one dialogue per forward pass keeps features independent of batching and workers
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(featurize, dialogues))
    else:
        feats = [featurize(d) for d in dialogues]

    rows = np.repeat(np.arange(len(feats)), [f.tfidf.indices.size for f in feats])
    cols = np.concatenate([f.tfidf.indices for f in feats]) if feats else np.zeros(0, np.int64)
    vals = np.concatenate([f.tfidf.weights for f in feats]) if feats else np.zeros(0)
    tfidf = sp.csr_matrix((vals, (rows, cols)), shape=(len(feats), vocab.size))
    tfidf.sort_indices()
    provenance = {embeddings[d.id].provenance for d in dialogues}
    return RetrievalIndex(
        ids=[d.id for d in dialogues],
        act=np.stack([f.act for f in feats]),
        tfidf=tfidf,
        content=np.stack([f.content for f in feats]),
        flows=[act_flow(d) for d in dialogues],
        vocab=vocab,
        h=h,
        provenance=";".join(sorted(provenance)),
        model=model,
        embeddings={d.id: rounded_embeddings(embeddings[d.id]) for d in dialogues},
    )


# Dots and squared norms go through the same reduction so that a stored row
# compared with an identical query gives a cosine of exactly 1.


def _row_dots(mat: np.ndarray, q: np.ndarray | None, chunk: int = 4096) -> np.ndarray:
    out = np.empty(mat.shape[0])
    for s in range(0, mat.shape[0], chunk):
        block = mat[s : s + chunk]
        out[s : s + chunk] = (block * (block if q is None else q)).sum(axis=1)
    return out


def _sparse_row_sq(m: sp.csr_matrix) -> np.ndarray:
    squared = sp.csr_matrix((m.data * m.data, m.indices, m.indptr), shape=m.shape)
    return squared @ np.ones(m.shape[1])


def _batch_cosine(dots: np.ndarray, row_sq: np.ndarray, q_sq: float) -> np.ndarray:
    denom = np.sqrt(row_sq * q_sq)
    out = np.zeros_like(dots)
    ok = denom > 0
    out[ok] = dots[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def similarities(index: RetrievalIndex, q: DialogueFeatures) -> tuple[np.ndarray, np.ndarray]:
    """S^a and S^c of the query against every index entry."""
    if q.act.shape[0] != index.act.shape[1] or q.content.shape[0] != index.content.shape[1]:
        raise ValueError("query feature dimensions do not match the index")
    if q.tfidf.dim != index.tfidf.shape[1]:
        raise ValueError("query TF-IDF dimension does not match the index vocabulary")
    cos_act = _batch_cosine(_row_dots(index.act, q.act), index._act_sq, float(_row_dots(q.act[None], None)[0]))
    qt = np.zeros(q.tfidf.dim)
    qt[q.tfidf.indices] = q.tfidf.weights
    q_row = sp.csr_matrix((q.tfidf.weights, q.tfidf.indices, [0, q.tfidf.indices.size]), shape=(1, q.tfidf.dim))
    cos_topic = _batch_cosine(index.tfidf @ qt, index._tfidf_sq, float((q_row @ qt)[0]))
    cos_content = _batch_cosine(
        _row_dots(index.content, q.content), index._content_sq, float(_row_dots(q.content[None], None)[0])
    )
    return (1.0 + cos_act) * (1.0 + cos_topic), cos_content


def _top_k(scores: np.ndarray, id_rank: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    if k <= 0:
        return candidates[:0]
    order = np.lexsort((id_rank[candidates], -scores[candidates]))
    return candidates[order[:k]]


def retrieve(
    index: RetrievalIndex,
    query: DialogueFeatures,
    ka: int,
    kc: int,
    exclude_self: bool = False,
    query_id: str | None = None,
) -> NeighborSet:
    """Top-``ka`` by S^a and top-``kc`` by S^c, merged without duplicates.

    A channel asking for more neighbours than there are candidates returns
    all of them. The union lists act-channel hits first, then content-only
    hits, each in rank order.
    """
    if ka < 0 or kc < 0 or ka + kc < 1:
        raise ValueError(f"need ka, kc >= 0 and ka + kc >= 1 (got {ka}, {kc})")
    candidates = np.arange(len(index))
    if exclude_self and query_id is not None and query_id in index:
        candidates = candidates[candidates != index._pos[query_id]]
    if candidates.size == 0:
        raise ValueError("empty candidate pool")
    sa, sc = similarities(index, query)
    top_a = _top_k(sa, index._id_rank, candidates, ka)
    top_c = _top_k(sc, index._id_rank, candidates, kc)
    union: list[Neighbor] = []
    in_c = set(top_c.tolist())
    for i in top_a:
        union.append(Neighbor(index.ids[i], float(sa[i]), float(sc[i]), ("act", "content") if i in in_c else ("act",)))
    seen = set(top_a.tolist())
    for i in top_c:
        if i not in seen:
            union.append(Neighbor(index.ids[i], float(sa[i]), float(sc[i]), ("content",)))
    return NeighborSet(
        act=tuple((index.ids[i], float(sa[i])) for i in top_a),
        content=tuple((index.ids[i], float(sc[i])) for i in top_c),
        union=tuple(union),
    )


# -- persistence ---------------------------------------------------------------


def _write_array(path: Path, arr: np.ndarray, dtype: str) -> None:
    np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tofile(path)


def _read_array(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.fromfile(path, dtype=np.dtype(dtype))
    if arr.size != math.prod(shape):
        raise ValueError(f"{path}: expected {math.prod(shape)} values, found {arr.size}")
    return arr.reshape(shape)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_index(index: RetrievalIndex, directory: str | Path) -> None:
    """Write the index as a directory of little-endian binary tables plus a manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    _write_array(out / "act.f32", index.act, "<f4")
    _write_array(out / "content.f32", index.content, "<f4")
    _write_array(out / "tfidf_indptr.i64", index.tfidf.indptr, "<i8")
    _write_array(out / "tfidf_indices.i32", index.tfidf.indices, "<i4")
    _write_array(out / "tfidf_data.f32", index.tfidf.data, "<f4")
    with (out / "ids.json").open("w", encoding="utf-8") as fh:
        json.dump(index.ids, fh, ensure_ascii=False)
    with (out / "flows.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
        for did, f in zip(index.ids, index.flows):
            fh.write(json.dumps({"id": did, "acts": [a.value for a in f.acts], "speakers": list(f.speakers)}) + "\n")
    index.vocab.save(out / "vocab.json")

    have_tokens = bool(index.embeddings) and all(d in index.embeddings for d in index.ids)
    if have_tokens:
        embs = [index.embeddings[d] for d in index.ids]
        offsets = np.cumsum([0] + [len(e.tokens) for e in embs])
        _write_array(out / "token_offsets.i64", offsets, "<i8")
        _write_array(out / "token_vectors.f32", np.concatenate([e.vectors for e in embs]), "<f4")
        with (out / "tokens.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
            for e in embs:
                fh.write(json.dumps({"dialogue_id": e.dialogue_id, "provenance": e.provenance, "tokens": list(e.tokens)}, ensure_ascii=False) + "\n")
    model_hash = None
    if index.model is not None:
        save_model(index.model, out / "model.npz")
        model_hash = _sha256_file(out / "model.npz")

    manifest = {
        "magic": INDEX_MAGIC,
        "format_version": INDEX_FORMAT_VERSION,
        "count": len(index),
        "h": index.h,
        "l": index.provenance,
        "dims": {"act": int(index.act.shape[1]), "tfidf": int(index.tfidf.shape[1]), "content": int(index.content.shape[1])},
        "tfidf_nnz": int(index.tfidf.nnz),
        "vocab_sha256": index.vocab.digest(),
        "model_sha256": model_hash,
        "has_token_embeddings": have_tokens,
        "total_tokens": int(sum(len(index.embeddings[d].tokens) for d in index.ids)) if have_tokens else 0,
    }
    with (out / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_index(directory: str | Path) -> RetrievalIndex:
    src = Path(directory)
    with (src / "manifest.json").open(encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("magic") != INDEX_MAGIC:
        raise ValueError(f"{src}: not an index directory")
    if m.get("format_version") != INDEX_FORMAT_VERSION:
        raise ValueError(f"{src}: unsupported index format version {m.get('format_version')}")
    n, dims = m["count"], m["dims"]
    with (src / "ids.json").open(encoding="utf-8") as fh:
        ids = json.load(fh)
    vocab = TfidfVocabulary.load(src / "vocab.json")
    if vocab.digest() != m["vocab_sha256"]:
        raise ValueError(f"{src}: vocabulary hash mismatch")
    tfidf = sp.csr_matrix(
        (
            _read_array(src / "tfidf_data.f32", "<f4", (m["tfidf_nnz"],)).astype(np.float64),
            _read_array(src / "tfidf_indices.i32", "<i4", (m["tfidf_nnz"],)).astype(np.int32),
            _read_array(src / "tfidf_indptr.i64", "<i8", (n + 1,)),
        ),
        shape=(n, dims["tfidf"]),
    )
    flows = []
    with (src / "flows.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            flows.append(ActFlow(tuple(SegmentAct.parse(a) for a in rec["acts"]), tuple(rec["speakers"])))
    embeddings: dict[str, TokenEmbeddings] = {}
    if m.get("has_token_embeddings"):
        offsets = _read_array(src / "token_offsets.i64", "<i8", (n + 1,))
        vecs = _read_array(src / "token_vectors.f32", "<f4", (m["total_tokens"], dims["content"])).astype(np.float64)
        with (src / "tokens.jsonl").open(encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                rec = json.loads(line)
                embeddings[rec["dialogue_id"]] = TokenEmbeddings(
                    rec["dialogue_id"], tuple(rec["tokens"]), vecs[offsets[i] : offsets[i + 1]], rec["provenance"]
                )
    model = None
    if (src / "model.npz").exists():
        if m.get("model_sha256") and _sha256_file(src / "model.npz") != m["model_sha256"]:
            raise ValueError(f"{src}: model checkpoint hash mismatch")
        model = load_model(src / "model.npz")
    return RetrievalIndex(
        ids=ids,
        act=_read_array(src / "act.f32", "<f4", (n, dims["act"])).astype(np.float64),
        tfidf=tfidf,
        content=_read_array(src / "content.f32", "<f4", (n, dims["content"])).astype(np.float64),
        flows=flows,
        vocab=vocab,
        h=m["h"],
        provenance=m.get("l", ""),
        model=model,
        embeddings=embeddings,
    )
