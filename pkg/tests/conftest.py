import json

import numpy as np
import pytest

from actflow.actlm import ActLmConfig, train_act_lm
from actflow.data import Dialogue, Segment, SegmentAct, Utterance
from actflow.desk import corpus_embeddings, desk_corpus
from actflow.features import build_tfidf
from actflow.retrieval import build_index

A = SegmentAct

COFFEE_RECORD = {
    "id": "snippet",
    "rating": None,
    "utterances": [
        {"speaker": 0, "segments": [
            {"text": "How are you?", "act": "greeting"},
            {"text": "May I have a cup of coffee?", "act": "directive"},
        ]},
        {"speaker": 1, "segments": [
            {"text": "Hmm.", "act": "backchannel-success"},
            {"text": "Certainly.", "act": "commissive"},
            {"text": "What kind of coffee do you like?", "act": "question"},
            {"text": "We have espresso and latte.", "act": "inform"},
        ]},
    ],
}

SMALL_LM = ActLmConfig(num_layers=2, num_heads=2, hidden_dim=32, epochs=2, batch_size=16, seed=0)


@pytest.fixture
def coffee_record():
    return json.loads(json.dumps(COFFEE_RECORD))


@pytest.fixture
def coffee_dialogue():
    return Dialogue(
        "snippet",
        (
            Utterance(0, (Segment("How are you?", A.GREETING), Segment("May I have a cup of coffee?", A.DIRECTIVE))),
            Utterance(1, (
                Segment("Hmm.", A.BACKCHANNEL_SUCCESS),
                Segment("Certainly.", A.COMMISSIVE),
                Segment("What kind of coffee do you like?", A.QUESTION),
                Segment("We have espresso and latte.", A.INFORM),
            )),
        ),
    )


@pytest.fixture(scope="session")
def desk():
    return desk_corpus(60, seed=11)


@pytest.fixture(scope="session")
def desk_embeddings(desk):
    return corpus_embeddings(desk, dim=16, seed=0)


@pytest.fixture(scope="session")
def small_model(desk):
    return train_act_lm(desk, SMALL_LM)


@pytest.fixture(scope="session")
def desk_index(desk, small_model, desk_embeddings):
    return build_index(desk, small_model, build_tfidf(desk), desk_embeddings, h=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -----------------------------------------------------------

import time
from contextlib import contextmanager

ACCEPTANCE_LINES: dict[int, str] = {}


class _Record:
    detail = ""


@pytest.fixture
def accept():
    """Time a criterion, enforce its limit and log one PASS/FAIL line."""

    @contextmanager
    def run(number, title, limit=None):
        rec = _Record()
        start = time.perf_counter()
        try:
            yield rec
        except BaseException as e:
            elapsed = time.perf_counter() - start
            ACCEPTANCE_LINES[number] = f"FAIL [{number:2d}] {title} ({elapsed:.1f}s): {type(e).__name__}: {str(e)[:160]}"
            raise
        elapsed = time.perf_counter() - start
        budget = "" if limit is None else f" / limit {limit:g}s"
        if limit is not None and elapsed > limit:
            ACCEPTANCE_LINES[number] = f"FAIL [{number:2d}] {title} ({elapsed:.1f}s{budget}): over time"
            raise AssertionError(f"criterion {number} took {elapsed:.1f}s, limit {limit}s")
        ACCEPTANCE_LINES[number] = f"PASS [{number:2d}] {title} ({elapsed:.1f}s{budget}) {rec.detail}".rstrip()

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
