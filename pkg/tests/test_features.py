import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from actflow.data import Dialogue, Segment, TokenEmbeddings, Utterance
from actflow.features import (
    SparseVector,
    TfidfVocabulary,
    build_tfidf,
    content_feature,
    cosine,
    tfidf_vector,
    tokenize,
    write_feature_csv,
)


def doc(did, text):
    return Dialogue(did, (Utterance(0, (Segment(text),)),))


@pytest.fixture
def toy():
    return [doc("1", "a b"), doc("2", "a c"), doc("3", "a")]


def test_tokenize():
    assert tokenize("What's UP, doc_2?") == ["what", "s", "up", "doc", "2"]


def test_document_frequencies(toy):
    vocab = build_tfidf(toy)
    assert vocab.size == 3
    assert vocab.df == {"a": 3, "b": 1, "c": 1}
    assert vocab.index("z") is None
    two = build_tfidf([doc("x", "tea time"), doc("y", "tea")])
    assert two.df["tea"] == 2


def test_tfidf_weights(toy):
    vocab = build_tfidf(toy)
    v = tfidf_vector("a b", vocab)
    dense = dict(zip(v.indices.tolist(), v.weights.tolist()))
    assert dense[vocab.index("a")] == pytest.approx(1.0, abs=1e-12)
    assert dense[vocab.index("b")] == pytest.approx(math.log(2) + 1, abs=1e-12)
    assert dense[vocab.index("b")] == pytest.approx(1.6931, abs=1e-4)
    doubled = tfidf_vector("a b b", vocab)
    i = list(doubled.indices).index(vocab.index("b"))
    assert doubled.weights[i] == pytest.approx(2 * dense[vocab.index("b")])


def test_out_of_vocabulary_is_zero(toy):
    v = tfidf_vector("zzz qqq", build_tfidf(toy))
    assert v.indices.size == 0 and v.dim == 3


def test_vocabulary_roundtrip(tmp_path, toy):
    vocab = build_tfidf(toy)
    vocab.save(tmp_path / "v.json")
    back = TfidfVocabulary.load(tmp_path / "v.json")
    assert back.df == vocab.df and back.digest() == vocab.digest()


def test_cosine_examples():
    assert cosine([1, 2, 3], [4, 5, 6]) == pytest.approx(32 / math.sqrt(14 * 77), abs=1e-15)
    assert cosine([1, 2, 3], [4, 5, 6]) == pytest.approx(0.974631, abs=1e-6)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([0, 0], [1, 1]) == 0.0


def test_cosine_sparse_matches_dense():
    a = SparseVector([0, 3], [1.0, 2.0], 5)
    b = SparseVector([3, 4], [4.0, 1.0], 5)
    assert cosine(a, b) == pytest.approx(cosine(a.to_dense(), b.to_dense()), abs=1e-15)
    with pytest.raises(TypeError):
        cosine(a, b.to_dense())
    with pytest.raises(ValueError):
        cosine(a, SparseVector([0], [1.0], 6))
    with pytest.raises(ValueError):
        SparseVector([2, 1], [1.0, 1.0], 5)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_cosine_self_is_exactly_one(x):
    if not np.any(x):
        return
    assert cosine(x, x) == 1.0


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_cosine_bounded_and_symmetric(a, b):
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine(b, a)


def test_content_feature_pooling():
    one = TokenEmbeddings("x", ("a",), [[0.5, -1.0]])
    np.testing.assert_array_equal(content_feature(one).vector, [0.5, -1.0])
    two = TokenEmbeddings("x", ("a", "b"), [[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(content_feature(two).vector, [1.0, 1.0])


@given(st.permutations(range(5)))
def test_content_feature_is_order_invariant(perm):
    rng = np.random.default_rng(7)
    vecs = rng.normal(size=(5, 4))
    base = TokenEmbeddings("x", tuple("abcde"), vecs)
    shuffled = TokenEmbeddings("x", tuple("abcde"), vecs[list(perm)])
    np.testing.assert_array_equal(content_feature(base).vector, content_feature(shuffled).vector)


def test_feature_csv(tmp_path):
    p = tmp_path / "f.csv"
    write_feature_csv([("d1", "act", np.array([1.0, 0.25]))], p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["dialogue_id", "kind", "values"]
    assert rows[1] == ["d1", "act", "1.0", "0.25"]
