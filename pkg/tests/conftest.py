import random

import pytest
from hypothesis import settings

from confprobe.corpus import Option, Question, QuestionSet

# Keep property tests reproducible run to run.
settings.register_profile("ci", derandomize=True, max_examples=100)
settings.load_profile("ci")


def make_mcq(qid="q1", m=4, gold=2, stem=None):
    stem = stem or f"Which of the following is marked correct for {qid}?"
    options = tuple(Option(canonical_index=i + 1, text=f"choice {qid}-{i + 1}") for i in range(m))
    q = Question(id=qid, kind="mcq", stem=stem, options=options, gold=gold)
    q.validate()
    return q


def make_numeric(qid="n1", gold="42"):
    q = Question(id=qid, kind="numeric", stem=f"Compute the value for {qid}.", gold=gold)
    q.validate()
    return q


@pytest.fixture
def mcq_question():
    return make_mcq()


@pytest.fixture
def numeric_question():
    return make_numeric()


@pytest.fixture
def small_set():
    return QuestionSet(questions=tuple(make_mcq(qid=f"q{i}", gold=1 + i % 4) for i in range(10)))


@pytest.fixture
def rng():
    return random.Random(1234)
