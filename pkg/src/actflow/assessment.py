"""Scoring a dialogue against its retrieved pseudo-references.

For every pseudo-reference R of a dialogue U::

    F_act(U, R)     = S^a(U, R) * BLEU(acts of U, acts of R)
    F_content(U, R) = BERTScore-F1(tokens of U, tokens of R)
    combined        = w * F_act + (1 - w) * F_content

and the dialogue's score is the largest ``combined`` over the references.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from .data import ActFlow, Dialogue, TokenEmbeddings, act_flow
from .retrieval import DialogueFeatures, RetrievalIndex, retrieve, rounded_embeddings

Variant = Literal["full", "seg_only", "consensus_bertscore"]
VARIANTS: tuple[str, ...] = ("full", "seg_only", "consensus_bertscore")
S_ACT_MAX = 4.0


@dataclass(frozen=True)
class AssessmentConfig:
    w: float = 0.5
    ka: int = 10
    kc: int = 10
    h: int = 3
    l: Optional[str] = None
    bleu_max_order: int = 4
    normalize_f_act: bool = False
    exclude_self: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"w must lie in [0, 1], got {self.w}")
        if self.ka < 0 or self.kc < 0:
            raise ValueError("ka and kc must be non-negative")
        if self.bleu_max_order < 1:
            raise ValueError("bleu_max_order must be at least 1")
        if self.h < 1:
            raise ValueError("h must be a positive layer index")


# -- BLEU over act sequences -------------------------------------------------------


def _as_labels(flow: ActFlow | Sequence) -> tuple:
    return tuple(flow.acts) if isinstance(flow, ActFlow) else tuple(flow)


def _ngram_counts(seq: tuple, n: int) -> Counter:
    return Counter(seq[i : i + n] for i in range(len(seq) - n + 1))


def act_bleu(hyp: ActFlow | Sequence, ref: ActFlow | Sequence, max_order: int = 4) -> float:
    """Sentence BLEU of ``hyp`` against the single reference ``ref``.

    The order is clipped to the shorter sequence. A precision with no
    matching n-grams takes the NIST geometric value: its match count becomes
    1/2^k for the k-th such order.
    """
    h, r = _as_labels(hyp), _as_labels(ref)
    if not h or not r:
        raise ValueError("BLEU needs two non-empty act flows")
    order = min(max_order, len(h), len(r))
    log_p = 0.0
    k = 0
    for n in range(1, order + 1):
        hc, rc = _ngram_counts(h, n), _ngram_counts(r, n)
        matched = sum(min(c, rc[g]) for g, c in hc.items())
        total = len(h) - n + 1
        if matched == 0:
            k += 1
            log_p += math.log(1.0 / (2**k * total))
        else:
            log_p += math.log(matched / total)
    bp = 1.0 if len(h) > len(r) else math.exp(1.0 - len(r) / len(h))
    return bp * math.exp(log_p / order)


# -- BERTScore-style token matching --------------------------------------------------


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def bertscore_prf(e_u: TokenEmbeddings | np.ndarray, e_r: TokenEmbeddings | np.ndarray) -> tuple[float, float, float]:
    u = e_u.vectors if isinstance(e_u, TokenEmbeddings) else np.asarray(e_u, dtype=np.float64)
    r = e_r.vectors if isinstance(e_r, TokenEmbeddings) else np.asarray(e_r, dtype=np.float64)
    if u.shape[0] == 0 or r.shape[0] == 0:
        raise ValueError("BERTScore needs at least one token on each side")
    if u.shape[1] != r.shape[1]:
        raise ValueError(f"embedding dimension mismatch: {u.shape[1]} vs {r.shape[1]}")
    sim = _unit_rows(u) @ _unit_rows(r).T
    p = float(sim.max(axis=1).mean())
    rec = float(sim.max(axis=0).mean())
    f = 0.0 if p + rec == 0 else 2 * p * rec / (p + rec)
    return p, rec, f


def bertscore_f1(e_u: TokenEmbeddings | np.ndarray, e_r: TokenEmbeddings | np.ndarray) -> float:
    return bertscore_prf(e_u, e_r)[2]


def f_act(s_act_value: float, flow_u: ActFlow, flow_r: ActFlow, max_order: int = 4, normalize: bool = False) -> float:
    value = s_act_value * act_bleu(flow_u, flow_r, max_order)
    return value / S_ACT_MAX if normalize else value


def f_content(e_u: TokenEmbeddings, e_r: TokenEmbeddings) -> float:
    return bertscore_f1(e_u, e_r)


# -- consensus score --------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceScore:
    id: str
    s_act: float
    act_bleu: float
    f_act: float
    f_content: float
    combined: float


@dataclass(frozen=True)
class ScoreBreakdown:
    dialogue_id: str
    variant: str
    score: float
    argmax_reference_id: str
    per_reference: tuple[ReferenceScore, ...]

    def to_record(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "variant": self.variant,
            "score": self.score,
            "argmax_reference_id": self.argmax_reference_id,
            "per_reference": [asdict(r) for r in self.per_reference],
        }


def variant_config(cfg: AssessmentConfig, variant: str) -> AssessmentConfig:
    if variant == "full":
        return cfg
    if variant == "seg_only":
        return replace(cfg, kc=0, w=1.0)
    if variant == "consensus_bertscore":
        return replace(cfg, ka=0, w=0.0)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def floweval_score(
    dialogue: Dialogue,
    embeddings: TokenEmbeddings,
    index: RetrievalIndex,
    cfg: AssessmentConfig,
    query: DialogueFeatures | None = None,
    reference_embeddings: Mapping[str, TokenEmbeddings] | None = None,
    variant: str = "full",
) -> ScoreBreakdown:
    if cfg.h != index.h:
        raise ValueError(f"config layer h={cfg.h} but index was built from layer {index.h}")
    flow_u = act_flow(dialogue)
    e_u = rounded_embeddings(embeddings)
    if query is None:
        query = index.query_features(dialogue, embeddings)
    neighbors = retrieve(index, query, cfg.ka, cfg.kc, exclude_self=cfg.exclude_self, query_id=dialogue.id)
    refs = []
    for nb in neighbors.union:
        e_r = index.embeddings.get(nb.id)
        if e_r is None and reference_embeddings is not None:
            e_r = reference_embeddings.get(nb.id)
            e_r = None if e_r is None else rounded_embeddings(e_r)
        if e_r is None:
            raise KeyError(f"no token embeddings for pseudo-reference {nb.id!r}")
        bleu = act_bleu(flow_u, index.flow(nb.id), cfg.bleu_max_order)
        fa = nb.s_act * bleu
        if cfg.normalize_f_act:
            fa /= S_ACT_MAX
        fc = bertscore_f1(e_u, e_r)
        refs.append(ReferenceScore(nb.id, nb.s_act, bleu, fa, fc, cfg.w * fa + (1.0 - cfg.w) * fc))
    best = min(refs, key=lambda r: (-r.combined, r.id))
    return ScoreBreakdown(dialogue.id, variant, best.combined, best.id, tuple(refs))


def score_variant(
    dialogue: Dialogue,
    embeddings: TokenEmbeddings,
    index: RetrievalIndex,
    cfg: AssessmentConfig,
    variant: str = "full",
    **kwargs,
) -> ScoreBreakdown:
    return floweval_score(dialogue, embeddings, index, variant_config(cfg, variant), variant=variant, **kwargs)


def score_corpus(
    dialogues: Iterable[Dialogue],
    embeddings: Mapping[str, TokenEmbeddings],
    index: RetrievalIndex,
    cfg: AssessmentConfig,
    variant: str = "full",
    workers: int = 1,
    reference_embeddings: Mapping[str, TokenEmbeddings] | None = None,
) -> list[ScoreBreakdown]:
    dialogues = list(dialogues)
    missing = [d.id for d in dialogues if d.id not in embeddings]
    if missing:
        raise KeyError(f"missing content embeddings for: {', '.join(missing[:10])}")

    def one(d: Dialogue) -> ScoreBreakdown:
        return score_variant(d, embeddings[d.id], index, cfg, variant, reference_embeddings=reference_embeddings)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, dialogues))
    return [one(d) for d in dialogues]


def write_scores(breakdowns: Iterable[ScoreBreakdown], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for b in breakdowns:
            fh.write(json.dumps(b.to_record(), ensure_ascii=False) + "\n")


# -- metric fusion ------------------------------------------------------------------------


def _standardize(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    if sd == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def fuse_metrics(a: Mapping[str, float], b: Mapping[str, float], mode: str = "raw") -> dict[str, float]:
    """Average two metrics per dialogue.

    ``raw`` averages the values as they are; ``znorm`` first standardizes each
    metric over the shared ids (population standard deviation).
    """
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        raise KeyError(f"id sets differ (only in first: {only_a[:5]}, only in second: {only_b[:5]})")
    ids = sorted(a)
    va = np.array([a[i] for i in ids], dtype=np.float64)
    vb = np.array([b[i] for i in ids], dtype=np.float64)
    if mode == "raw":
        fused = (va + vb) / 2.0
    elif mode == "znorm":
        fused = (_standardize(va) + _standardize(vb)) / 2.0
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return {i: float(v) for i, v in zip(ids, fused)}
