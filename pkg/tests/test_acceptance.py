"""Acceptance suite: one test per criterion, each with its tolerance and time budget.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL line per criterion.
"""

import csv
import json
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from actflow.actlm import (
    ActLmConfig,
    _fit_length,
    init_params,
    loss_and_grads,
    majority_baseline,
    make_masked_batch,
    masked_accuracy,
    new_model,
    train_act_lm,
)
from actflow.assessment import AssessmentConfig, act_bleu, bertscore_f1, floweval_score
from actflow.benchmark import kendall_tau_b, pearson, spearman
from actflow.cli import load_score_map
from actflow.data import ACTS, ActFlow, Corpus, act_flow
from actflow.desk import (
    corpus_embeddings,
    desk_corpus,
    grammar_flows,
    hashed_embeddings,
    rated_corpus,
    repeat_segment,
)
from actflow.features import TfidfVocabulary, build_tfidf
from actflow.retrieval import RetrievalIndex, build_index, retrieve, s_act, s_content
from actflow.tagger import TaggerParams, tagger_accuracy, train_tagger

from oracles import average_rank_oracle, bleu_oracle, kendall_tau_b_oracle, pearson_oracle

pytestmark = pytest.mark.acceptance


# 1 ---------------------------------------------------------------------------------


def test_criterion_01_identity_suite(accept):
    with accept(1, "identity suite, tolerance 1e-9", limit=5) as rec:
        corpus = desk_corpus(30, seed=101)
        embs = corpus_embeddings(corpus, dim=24, seed=1)
        model = new_model(ActLmConfig())  # full-size 4x4x256 encoder
        index = build_index(corpus, model, build_tfidf(corpus), embs, h=3)
        worst = 0.0
        for d in corpus:
            u = index.query_features(d, embs[d.id])
            r = index.features(d.id)
            e = index.embeddings[d.id]
            worst = max(
                worst,
                abs(s_act(u, r) - 4.0),
                abs(s_content(u, r) - 1.0),
                abs(act_bleu(act_flow(d), act_flow(d)) - 1.0),
                abs(bertscore_f1(e, e) - 1.0),
            )
            for w in (0.0, 0.3, 0.5, 1.0):
                b = floweval_score(d, embs[d.id], index, AssessmentConfig(w=w, h=3))
                worst = max(worst, abs(b.score - (1 + 3 * w)))
        assert worst <= 1e-9, worst
        rec.detail = f"max deviation {worst:.1e} over {len(corpus)} dialogues"


# 2 ---------------------------------------------------------------------------------


def test_criterion_02_bleu_oracle(accept):
    with accept(2, "act BLEU vs brute-force n-gram oracle, 1000 pairs, tolerance 1e-9", limit=30) as rec:
        rng = np.random.default_rng(2022)
        worst = 0.0
        for _ in range(1000):
            h = rng.integers(0, 11, size=int(rng.integers(1, 21))).tolist()
            r = rng.integers(0, 11, size=int(rng.integers(1, 21))).tolist()
            order = int(rng.integers(1, 5))
            got = act_bleu([ACTS[i] for i in h], [ACTS[i] for i in r], order)
            worst = max(worst, abs(got - bleu_oracle(h, r, order)))
        assert worst <= 1e-9, worst
        rec.detail = f"max |diff| {worst:.1e}"


# 3 ---------------------------------------------------------------------------------


def test_criterion_03_correlation_oracles(accept):
    with accept(3, "Pearson/Spearman/Kendall vs definitional oracles, tolerance 1e-12", limit=10) as rec:
        up, down = [1.0, 2.0, 3.0], [3.0, 2.0, 1.0]
        assert kendall_tau_b((up, down))[0] == -1.0
        assert spearman((up, down))[0] == -1.0
        assert pearson((up, down))[0] == -1.0
        rng = np.random.default_rng(3)
        worst = 0.0
        done = 0
        while done < 100:
            n = int(rng.integers(3, 51))
            if done % 2:
                x, y = rng.normal(size=n), rng.normal(size=n)
            else:
                x = rng.integers(0, 7, size=n).astype(float)
                y = rng.integers(0, 7, size=n).astype(float)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            rx, ry = average_rank_oracle(list(x)), average_rank_oracle(list(y))
            worst = max(
                worst,
                abs(pearson((x, y))[0] - pearson_oracle(x, y)),
                abs(spearman((x, y))[0] - pearson_oracle(rx, ry)),
                abs(kendall_tau_b((x, y))[0] - kendall_tau_b_oracle(list(x), list(y))),
            )
            done += 1
        assert worst <= 1e-12, worst
        rec.detail = f"max |diff| {worst:.1e} over 100 series"


# 4 ---------------------------------------------------------------------------------


def test_criterion_04_masked_act_learning(accept):
    with accept(4, "masked-act accuracy gain >= 0.10 on a deterministic grammar", limit=600) as rec:
        every, _ = grammar_flows(5500, seed=4)
        flows, held_out = every[:5000], every[5000:]
        model = train_act_lm(flows, replace(ActLmConfig(), epochs=1, seed=0))
        acc = masked_accuracy(model, held_out, seed=1)
        base = majority_baseline(held_out)
        assert acc - base >= 0.10, (acc, base)
        rec.detail = f"accuracy {acc:.3f} vs majority {base:.3f} (gain {acc - base:.3f})"


# 5 ---------------------------------------------------------------------------------


def _micro_setup():
    cfg = ActLmConfig(num_layers=2, num_heads=2, hidden_dim=8, ffn_dim=16, max_seq_len=10,
                      dtype="float64", init_std=0.5, seed=1)
    rng = np.random.default_rng(0)
    params = init_params(cfg, rng)
    # move gains and biases off their initial values so every path carries gradient
    for k in params:
        leaf = k.split(".")[-1]
        if leaf.endswith("_g"):
            params[k] = 1.0 + 0.3 * rng.standard_normal(params[k].shape)
        elif leaf.endswith("_b") or leaf in ("bq", "bk", "bv", "bo", "b1", "b2"):
            params[k] = 0.3 * rng.standard_normal(params[k].shape)
    flows = [ActFlow.of([ACTS[i] for i in rng.integers(11, size=n)], rng.integers(2, size=n)) for n in (3, 5, 7)]
    batch = make_masked_batch([_fit_length(f, cfg, False) for f in flows], 0.4, rng)
    return cfg, params, batch, rng


def test_criterion_05_gradient_check(accept):
    with accept(5, "analytic vs central-difference gradients, rel error < 1e-4", limit=60) as rec:
        cfg, params, batch, rng = _micro_setup()
        _, grads = loss_and_grads(params, cfg, batch)
        used_tokens = set(batch.ids.ravel().tolist())
        width = batch.ids.shape[1]

        def structurally_zero(name, idx):
            # key biases shift every score of a query equally; softmax ignores them
            return (
                name.endswith(".bk")
                or (name == "tok_emb" and idx[0] not in used_tokens)
                or (name == "pos_emb" and idx[0] >= width)
            )

        coords = [(k, i) for k, g in grads.items() for i in np.ndindex(g.shape) if not structurally_zero(k, i)]
        zeros = [(k, i) for k, g in grads.items() for i in np.ndindex(g.shape) if structurally_zero(k, i)]
        eps = 1e-5

        def numeric(k, i):
            old = params[k][i]
            params[k][i] = old + eps
            up, _ = loss_and_grads(params, cfg, batch)
            params[k][i] = old - eps
            down, _ = loss_and_grads(params, cfg, batch)
            params[k][i] = old
            return (up - down) / (2 * eps)

        worst = 0.0
        for j in rng.choice(len(coords), size=100, replace=False):
            k, i = coords[j]
            a, n = float(grads[k][i]), numeric(k, i)
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-12))
        assert worst < 1e-4, worst
        # the excluded coordinates really are flat: zero analytic and tiny numeric gradient
        for j in rng.choice(len(zeros), size=20, replace=False):
            k, i = zeros[j]
            assert grads[k][i] == 0.0 or abs(grads[k][i]) < 1e-12
            assert abs(numeric(k, i)) < 1e-8
        rec.detail = f"worst relative error {worst:.1e} over 100 coordinates"


# 6 ---------------------------------------------------------------------------------


def _random_index(n, rng, dup_every=7):
    d_act, d_topic, d_content = 12, 40, 10
    act = rng.normal(size=(n, d_act)).astype(np.float32).astype(np.float64)
    content = rng.normal(size=(n, d_content)).astype(np.float32).astype(np.float64)
    topic = (rng.random((n, d_topic)) < 0.15) * rng.random((n, d_topic))
    topic = topic.astype(np.float32).astype(np.float64)
    # exact duplicate rows exercise the id tie-break
    for i in range(dup_every, n, dup_every):
        act[i], content[i], topic[i] = act[i - 1], content[i - 1], topic[i - 1]
    ids = [f"r{i:05d}" for i in range(n)]
    vocab = TfidfVocabulary({f"t{j}": 1 for j in range(d_topic)}, n)
    flows = [ActFlow.of(["inform"])] * n
    return RetrievalIndex(ids, act, sp.csr_matrix(topic), content, flows, vocab, h=1)


def _scan(index, q):
    scored = []
    for did in index.ids:
        r = index.features(did)
        scored.append((did, s_act(q, r), s_content(q, r)))
    by_a = [t[0] for t in sorted(scored, key=lambda t: (-t[1], t[0]))]
    by_c = [t[0] for t in sorted(scored, key=lambda t: (-t[2], t[0]))]
    return by_a, by_c


def test_criterion_06_retrieval_correctness(accept):
    with accept(6, "retrieval equals exhaustive scan; in-index query is top-1", limit=30) as rec:
        rng = np.random.default_rng(6)
        checks = 0
        for n in (1, 5, 37, 1000):
            index = _random_index(n, rng)
            for q_row in rng.choice(n, size=min(n, 3), replace=False):
                q = index.features(index.ids[q_row])
                by_a, by_c = _scan(index, q)
                sizes = range(n + 2) if n <= 37 else sorted({0, 1, 2, 3, 10, 50, 333, 999, 1000, 1001})
                for ka in sizes:
                    for kc in (sizes if n <= 37 else (0, 1, 10, 1000)):
                        if ka + kc == 0:
                            continue
                        got = retrieve(index, q, ka, kc)
                        assert [i for i, _ in got.act] == by_a[:ka]
                        assert [i for i, _ in got.content] == by_c[:kc]
                        want_union = by_a[:ka] + [i for i in by_c[:kc] if i not in set(by_a[:ka])]
                        assert got.ids == want_union
                        checks += 1
                # query is a stored row: it (or an equal earlier duplicate) leads both channels
                top = retrieve(index, q, 1, 1)
                assert top.act[0][1] == 4.0 and top.content[0][1] == 1.0

        corpus = desk_corpus(1000, seed=66)
        embs = corpus_embeddings(corpus, dim=32, seed=6)
        model = new_model(ActLmConfig(num_layers=2, num_heads=2, hidden_dim=32))
        index = build_index(corpus, model, build_tfidf(corpus), embs, h=2)
        # top-1 is only well defined when no other entry has identical features
        assert len(np.unique(index.content, axis=0)) == len(index)
        for d in corpus:
            got = retrieve(index, index.query_features(d, embs[d.id]), 1, 1)
            assert got.act[0] == (d.id, 4.0), (d.id, got.act[0])
            assert got.content[0] == (d.id, 1.0), (d.id, got.content[0])
        rec.detail = f"{checks} (index, query, ka, kc) cases; 1000/1000 self top-1"


# 7 ---------------------------------------------------------------------------------


def test_criterion_07_repetition_lowers_score(accept):
    with accept(7, "10x segment repetition lowers the score for >= 80% of dialogues", limit=120) as rec:
        corpus = desk_corpus(100, seed=3)
        embs = corpus_embeddings(corpus, dim=32, seed=0)
        model = train_act_lm(corpus, replace(ActLmConfig(), epochs=3, seed=0))
        index = build_index(corpus, model, build_tfidf(corpus), embs, h=3)
        cfg = AssessmentConfig(h=3, exclude_self=True)
        rng = np.random.default_rng(7)
        lower = 0
        for d in corpus:
            base = floweval_score(d, embs[d.id], index, cfg).score
            bad = repeat_segment(d, int(rng.integers(d.num_segments)), 10)
            worse = floweval_score(bad, hashed_embeddings(bad, dim=32, seed=0), index, cfg).score
            lower += worse < base
        assert lower >= 80, lower
        rec.detail = f"{lower}/100 dialogues scored lower"


# 8 ---------------------------------------------------------------------------------


def _held_out_gain(corpus, split=0.8):
    dialogues = list(corpus)
    cut = int(len(dialogues) * split)
    train, test = Corpus(tuple(dialogues[:cut])), Corpus(tuple(dialogues[cut:]))
    model = train_tagger(train, TaggerParams())
    counts = np.zeros(len(ACTS))
    for d in train:
        for _, _, s in d.iter_segments():
            counts[s.act.index] += 1
    majority = int(counts.argmax())
    gold = [s.act.index for d in test for _, _, s in d.iter_segments()]
    base = float(np.mean([g == majority for g in gold]))
    return tagger_accuracy(model, test), base, len(gold) + int(counts.sum()), int((counts > 0).sum())


def test_criterion_08_tagger_floor(accept):
    with accept(8, "held-out tagger accuracy >= majority + 0.05", limit=120) as rec:
        parts = []
        for name, corpus in (("desk", desk_corpus(250, seed=8)), ("rated", rated_corpus(250, seed=18))):
            acc, base, segments, labels = _held_out_gain(corpus)
            assert segments >= 1000 and labels >= 3
            assert acc >= base + 0.05, (name, acc, base)
            parts.append(f"{name}: {acc:.3f} vs {base:.3f} on {segments} segments")
        rec.detail = "; ".join(parts)


# 9 ---------------------------------------------------------------------------------


def _pipeline(root: Path) -> dict[str, bytes]:
    def cli(*args):
        subprocess.run([sys.executable, "-m", "actflow", *map(str, args)], check=True, capture_output=True)

    desk = root / "desk"
    cli("make-desk", "--output-dir", desk, "--n", 60, "--n-eval", 25, "--dim", 16, "--seed", 9)
    cli("train-actlm", "--corpus", desk / "retrieval.jsonl", "--model", root / "m.npz", "--seed", 9,
        "--layers", 2, "--heads", 2, "--hidden", 32, "--epochs", 2)
    cli("build-index", "--corpus", desk / "retrieval.jsonl", "--embeddings", desk / "retrieval_embeddings.jsonl",
        "--model", root / "m.npz", "--index-dir", root / "idx", "--h", 2)
    cli("score", "--index-dir", root / "idx", "--corpus", desk / "evaluation.jsonl",
        "--embeddings", desk / "evaluation_embeddings.jsonl", "--output", root / "scores.jsonl")
    cli("benchmark", "--ratings", desk / "evaluation.jsonl", "--metric", f"floweval={root / 'scores.jsonl'}",
        "--csv", root / "report.csv", "--table", root / "report.txt")
    return {name: (root / name).read_bytes() for name in ("m.npz", "scores.jsonl", "report.csv", "report.txt")}


def test_criterion_09_end_to_end_determinism(accept, tmp_path):
    with accept(9, "two seeded pipeline runs give byte-identical outputs") as rec:
        first = _pipeline(tmp_path / "a")
        second = _pipeline(tmp_path / "b")
        for name in first:
            assert first[name] == second[name], name
        rec.detail = f"score file {len(first['scores.jsonl'])} bytes identical"


# 10 --------------------------------------------------------------------------------


def _write_user_data(root: Path, rng):
    """Hand-written inputs in the documented JSONL formats, independent of the desk helpers."""
    acts = [a.value for a in ACTS]

    def dialogue(did, n, rating=None):
        utts, speaker = [], 0
        seq = rng.integers(0, 11, size=n)
        words = ["tea", "rain", "city", "music", "bus", "film", "work", "dog"]
        for k in range(0, n, 2):
            segs = [{"text": f"{words[int(a) % 8]} {k} {'?' if a == 0 else '.'}", "act": acts[int(a)]} for a in seq[k : k + 2]]
            utts.append({"speaker": speaker, "segments": segs})
            speaker = 1 - speaker
        return {"id": did, "rating": rating, "utterances": utts}

    retrieval = [dialogue(f"ref{i:03d}", int(rng.integers(4, 12))) for i in range(40)]
    rated = [dialogue(f"usr{i:03d}", int(rng.integers(4, 12)), round(float(rng.uniform(1, 5)), 1)) for i in range(30)]
    for name, rows in (("retrieval.jsonl", retrieval), ("rated.jsonl", rated)):
        (root / name).write_text("".join(json.dumps(r) + "\n" for r in rows))
    for name, rows in (("retrieval_emb.jsonl", retrieval), ("rated_emb.jsonl", rated)):
        with (root / name).open("w") as fh:
            for r in rows:
                tokens = [w for u in r["utterances"] for s in u["segments"] for w in s["text"].split()]
                vecs = rng.normal(size=(len(tokens), 8)).round(6).tolist()
                fh.write(json.dumps({"dialogue_id": r["id"], "provenance": "user", "tokens": tokens, "vectors": vecs}) + "\n")


def test_criterion_10_reproduction_path(accept, tmp_path):
    with accept(10, "benchmark emits the correlation table; fuse raw is the plain average") as rec:
        from actflow.cli import main

        _write_user_data(tmp_path, np.random.default_rng(10))
        t = tmp_path
        assert main(["validate", "--corpus", str(t / "rated.jsonl")]) == 0
        assert main(["train-actlm", "--corpus", str(t / "retrieval.jsonl"), "--model", str(t / "m.npz"),
                     "--layers", "2", "--heads", "2", "--hidden", "32", "--epochs", "1"]) == 0
        assert main(["build-index", "--corpus", str(t / "retrieval.jsonl"), "--embeddings", str(t / "retrieval_emb.jsonl"),
                     "--model", str(t / "m.npz"), "--index-dir", str(t / "idx"), "--h", "2"]) == 0
        for variant, out in (("full", "flow.jsonl"), ("consensus-bertscore", "bs.jsonl")):
            assert main(["score", "--index-dir", str(t / "idx"), "--corpus", str(t / "rated.jsonl"),
                         "--embeddings", str(t / "rated_emb.jsonl"), "--output", str(t / out), "--variant", variant]) == 0
        assert main(["fuse", "--a", f"flow={t / 'flow.jsonl'}", "--b", f"bs={t / 'bs.jsonl'}", "--mode", "raw",
                     "--output", str(t / "fused.jsonl")]) == 0
        assert main(["benchmark", "--ratings", str(t / "rated.jsonl"), "--dataset", "user",
                     "--metric", f"FlowEval={t / 'flow.jsonl'}", "--metric", f"Consensus-BERTScore={t / 'bs.jsonl'}",
                     "--metric", f"FlowEval+BERTScore={t / 'fused.jsonl'}",
                     "--csv", str(t / "report.csv"), "--table", str(t / "report.txt")]) == 0

        a, b, fused = (load_score_map(t / n) for n in ("flow.jsonl", "bs.jsonl", "fused.jsonl"))
        assert fused == {k: (a[k] + b[k]) / 2 for k in a}

        table = (t / "report.txt").read_text().splitlines()
        assert table[0].split() == ["user"] * 3
        assert table[1].split() == ["Metric", "Pearson", "Spearman", "Kendall"]
        rows = list(csv.DictReader((t / "report.csv").open()))
        assert [r["metric"] for r in rows] == ["FlowEval", "Consensus-BERTScore", "FlowEval+BERTScore"]
        for r, line in zip(rows, table[3:6]):
            cells = line.split()[-3:]
            for which, cell in zip(("pearson", "spearman", "kendall"), cells):
                p = float(r[f"{which}_p"])
                assert int(r[f"{which}_significant"]) == (p < 0.05)
                assert cell.endswith("*") == (p >= 0.05)
                assert float(cell.rstrip("*")) == pytest.approx(float(r[which]), abs=5e-4)
        rec.detail = f"{len(rows)} metric rows with p<0.05 flags; fused raw == mean"
