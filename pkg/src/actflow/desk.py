"""Seeded synthetic corpora for tests, demos and desk-scale experiments.

None of this is real conversational data. Dialogues are sampled from a
hand-written act Markov chain and rendered with per-act templates; content
"embeddings" are deterministic pseudo-random vectors keyed by token.
"""

from __future__ import annotations

import hashlib
from dataclasses import replace
from typing import Sequence

import numpy as np

from .data import ACTS, ActFlow, Corpus, Dialogue, Segment, SegmentAct, TokenEmbeddings, Utterance
from .features import tokenize

A = SegmentAct

TOPICS: dict[str, tuple[str, ...]] = {
    "coffee": ("coffee", "espresso", "latte", "cafe", "beans", "mug"),
    "travel": ("trip", "flight", "hotel", "beach", "passport", "train"),
    "music": ("guitar", "concert", "band", "song", "piano", "album"),
    "work": ("office", "meeting", "boss", "project", "deadline", "shift"),
    "food": ("pizza", "pasta", "salad", "dinner", "recipe", "kitchen"),
    "sports": ("soccer", "tennis", "match", "team", "coach", "gym"),
    "books": ("novel", "library", "author", "chapter", "poem", "story"),
    "pets": ("dog", "cat", "puppy", "vet", "leash", "kitten"),
}

TEMPLATES: dict[SegmentAct, tuple[str, ...]] = {
    A.QUESTION: (
        "What time is it?",
        "Where is the nearest bank?",
        "Do you like the {0}?",
        "What kind of {0} do you like?",
        "Have you ever tried the {0}?",
        "How often do you go to the {0}?",
        "Why do you prefer the {0} over the {1}?",
    ),
    A.INFORM: (
        "The train is leaving.",
        "The meeting starts in 5 minutes.",
        "I really enjoy the {0} and the {1}.",
        "We have {0} and {1}.",
        "My favorite is the {0}.",
        "I went to the {0} last week.",
        "The {0} was great this year.",
    ),
    A.DIRECTIVE: (
        "Please don't do this ever again.",
        "Please bring the {0} tomorrow.",
        "Give me a cup of {0}, please.",
        "Let me see the {0}.",
    ),
    A.COMMISSIVE: (
        "I will not do that any more.",
        "May I offer you an upgrade?",
        "Certainly.",
        "I will bring the {0} tomorrow.",
        "Sure, I can do that.",
    ),
    A.GREETING: ("How are you?", "Hello there!", "Hi!", "I'm fine.", "Good morning!"),
    A.GOODBYE: ("Bye.", "See you.", "Goodbye!", "Talk to you later."),
    A.APOLOGY: ("Sorry.", "No problem.", "I apologize for that.", "My apologies."),
    A.THANKING: ("Thanks.", "You are welcome.", "Thank you very much.", "Thanks a lot!"),
    A.BACKCHANNEL_SUCCESS: ("Okay.", "Uh-huh.", "Hmm.", "I see.", "Right."),
    A.BACKCHANNEL_FAILURE: ("Sorry?", "Excuse me?", "Pardon?", "What do you mean?"),
    A.CHECK_UNDERSTANDING: ("Do you get what I just said?", "Does that make sense?", "Are you following me?"),
}

# act -> [(next act, weight)]; every dialogue starts with a greeting
_CHAIN: dict[SegmentAct, tuple[tuple[SegmentAct, float], ...]] = {
    A.GREETING: ((A.GREETING, 2), (A.QUESTION, 4), (A.DIRECTIVE, 1)),
    A.QUESTION: ((A.INFORM, 6), (A.BACKCHANNEL_FAILURE, 0.5), (A.QUESTION, 1)),
    A.INFORM: ((A.QUESTION, 4), (A.INFORM, 2), (A.BACKCHANNEL_SUCCESS, 2), (A.CHECK_UNDERSTANDING, 0.3), (A.GOODBYE, 0.4)),
    A.BACKCHANNEL_SUCCESS: ((A.INFORM, 3), (A.QUESTION, 3)),
    A.BACKCHANNEL_FAILURE: ((A.APOLOGY, 2), (A.INFORM, 2)),
    A.CHECK_UNDERSTANDING: ((A.BACKCHANNEL_SUCCESS, 3), (A.INFORM, 1)),
    A.DIRECTIVE: ((A.COMMISSIVE, 4), (A.APOLOGY, 1)),
    A.COMMISSIVE: ((A.THANKING, 3), (A.QUESTION, 2)),
    A.APOLOGY: ((A.INFORM, 2), (A.QUESTION, 2)),
    A.THANKING: ((A.THANKING, 1), (A.QUESTION, 2), (A.GOODBYE, 2)),
    A.GOODBYE: ((A.GOODBYE, 1),),
}


def _next_act(act: SegmentAct, rng: np.random.Generator) -> SegmentAct:
    options = _CHAIN[act]
    w = np.array([x for _, x in options], dtype=np.float64)
    return options[int(rng.choice(len(options), p=w / w.sum()))][0]


def _render(act: SegmentAct, topic: str, rng: np.random.Generator) -> str:
    words = TOPICS[topic]
    tpl = TEMPLATES[act][int(rng.integers(len(TEMPLATES[act])))]
    a, b = rng.choice(len(words), size=2, replace=False)
    return tpl.format(words[a], words[b])


def markov_acts(length: int, rng: np.random.Generator) -> list[SegmentAct]:
    acts = [A.GREETING]
    while len(acts) < length:
        nxt = _next_act(acts[-1], rng)
        if nxt is A.GOODBYE and len(acts) < length - 2:
            nxt = A.QUESTION
        acts.append(nxt)
    return acts


def _dialogue_from_acts(did: str, acts: Sequence[SegmentAct], topic: str, rng: np.random.Generator, rating=None) -> Dialogue:
    utts, current, speaker = [], [], 0
    for i, act in enumerate(acts):
        current.append(Segment(_render(act, topic, rng), act))
        turn_ends = act in (A.QUESTION, A.DIRECTIVE, A.BACKCHANNEL_FAILURE, A.CHECK_UNDERSTANDING) or rng.random() < 0.35
        if turn_ends or len(current) == 3 or i == len(acts) - 1:
            utts.append(Utterance(speaker, tuple(current)))
            current, speaker = [], 1 - speaker
    return Dialogue(did, tuple(utts), rating)


def desk_corpus(n: int, seed: int = 0, min_len: int = 6, max_len: int = 18, prefix: str = "d") -> Corpus:
    """``n`` well-formed labeled dialogues, one topic each."""
    rng = np.random.default_rng(seed)
    topics = sorted(TOPICS)
    out = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        topic = topics[int(rng.integers(len(topics)))]
        out.append(_dialogue_from_acts(f"{prefix}{i:05d}", markov_acts(length, rng), topic, rng))
    return Corpus(tuple(out))


def rated_corpus(n: int, seed: int = 0, prefix: str = "e") -> Corpus:
    """Evaluation dialogues with a synthetic 1-5 rating.

    About half the dialogues are degraded (repeated segments, shuffled acts or
    drifting topics); the rating falls with the amount of damage plus noise.
    """
    rng = np.random.default_rng(seed)
    base = desk_corpus(n, seed=seed + 7919, prefix=prefix)
    out = []
    for d in base:
        damage = 0.0
        kind = rng.integers(4)
        if kind == 1:
            reps = int(rng.integers(3, 10))
            d = repeat_segment(d, int(rng.integers(d.num_segments)), reps)
            damage = reps / 3.0
        elif kind == 2:
            d = shuffle_acts(d, rng)
            damage = 1.5
        rating = float(np.clip(4.5 - damage + rng.normal(0, 0.5), 1.0, 5.0))
        out.append(replace(d, rating=round(rating, 2)))
    return Corpus(tuple(out), "evaluation")


def repeat_segment(d: Dialogue, seg_index: int, copies: int) -> Dialogue:
    """Insert ``copies`` duplicates of the ``seg_index``-th segment right after it."""
    utts, k = [], 0
    for u in d.utterances:
        segs = []
        for s in u.segments:
            segs.append(s)
            if k == seg_index:
                segs.extend([s] * copies)
            k += 1
        utts.append(Utterance(u.speaker, tuple(segs)))
    if seg_index >= k:
        raise IndexError(f"segment {seg_index} outside dialogue of {k} segments")
    return replace(d, utterances=tuple(utts))


def shuffle_acts(d: Dialogue, rng: np.random.Generator) -> Dialogue:
    segs = [s for _, _, s in d.iter_segments()]
    perm = rng.permutation(len(segs))
    it = iter(segs[i] for i in perm)
    return replace(d, utterances=tuple(Utterance(u.speaker, tuple(next(it) for _ in u.segments)) for u in d.utterances))


def grammar_flows(n: int, seed: int = 0, min_len: int = 4, max_len: int = 16) -> tuple[list[ActFlow], dict[SegmentAct, SegmentAct]]:
    """Flows from an act chain whose transitions are deterministic.

    Returns the flows and the successor map; each flow starts at a random act.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ACTS))
    successor = {ACTS[i]: ACTS[int(perm[i])] for i in range(len(ACTS))}
    flows = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        acts = [ACTS[int(rng.integers(len(ACTS)))]]
        for _ in range(length - 1):
            acts.append(successor[acts[-1]])
        flows.append(ActFlow(tuple(acts), tuple(i % 2 for i in range(length))))
    return flows, successor


def flows_to_corpus(flows: Sequence[ActFlow], prefix: str = "g") -> Corpus:
    """Wrap act flows as dialogues with one placeholder segment per act."""
    out = []
    for i, f in enumerate(flows):
        utts = [Utterance(s, (Segment(a.value, a),)) for a, s in zip(f.acts, f.speakers)]
        out.append(Dialogue(f"{prefix}{i:05d}", tuple(utts)))
    return Corpus(tuple(out))


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)


def hashed_embeddings(d: Dialogue, dim: int = 32, seed: int = 0) -> TokenEmbeddings:
    """Deterministic per-token vectors standing in for an external encoder."""
    tokens = tokenize(d.text) or ["<empty>"]
    vecs = np.stack([_token_vector(t, dim, seed) for t in tokens])
    return TokenEmbeddings(d.id, tuple(tokens), vecs, f"hashed-token-v1 dim={dim} seed={seed}")


def corpus_embeddings(corpus: Corpus | Sequence[Dialogue], dim: int = 32, seed: int = 0) -> dict[str, TokenEmbeddings]:
    return {d.id: hashed_embeddings(d, dim, seed) for d in corpus}
