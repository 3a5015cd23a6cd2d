import json

import pytest
from hypothesis import given, strategies as st

from confprobe.corpus import (
    CorpusError,
    QuestionSet,
    load_questions,
    question_to_dict,
    save_questions,
    split_set,
)

from conftest import make_mcq, make_numeric


def write_lines(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")


def mcq_row(qid="q1", texts=("a1", "a2", "a3", "a4"), gold=2):
    return {
        "id": qid,
        "kind": "mcq",
        "stem": f"stem for {qid}",
        "options": [{"text": t} for t in texts],
        "gold": gold,
        "tags": [],
    }


def test_load_two_mcq_rows(tmp_path):
    path = tmp_path / "q.jsonl"
    write_lines(path, [mcq_row("q1"), mcq_row("q2")])
    qs = load_questions(path)
    assert qs.n == 2
    assert [q.id for q in qs.questions] == ["q1", "q2"]
    assert qs.questions[0].gold == 2


def test_gold_out_of_range(tmp_path):
    path = tmp_path / "q.jsonl"
    write_lines(path, [mcq_row(gold=5)])
    with pytest.raises(CorpusError, match="gold out of range"):
        load_questions(path)


def test_numeric_row(tmp_path):
    path = tmp_path / "q.jsonl"
    write_lines(path, [{"id": "n1", "kind": "numeric", "stem": "2+2?", "gold": "4"}])
    qs = load_questions(path)
    assert qs.questions[0].kind == "numeric"
    assert qs.questions[0].gold == "4"


def test_duplicate_id_rejected(tmp_path):
    path = tmp_path / "q.jsonl"
    write_lines(path, [mcq_row("q1"), mcq_row("q1")])
    with pytest.raises(CorpusError, match="duplicate question id"):
        load_questions(path)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "q.jsonl"
    path.write_text(json.dumps(mcq_row()) + "\n{broken\n", encoding="utf-8")
    with pytest.raises(CorpusError, match=":2"):
        load_questions(path)


def test_missing_gold(tmp_path):
    row = mcq_row()
    del row["gold"]
    path = tmp_path / "q.jsonl"
    write_lines(path, [row])
    with pytest.raises(CorpusError, match="gold"):
        load_questions(path)


def test_duplicate_option_texts_rejected(tmp_path):
    path = tmp_path / "q.jsonl"
    write_lines(path, [mcq_row(texts=("same", "Same ", "x", "y"))])
    with pytest.raises(CorpusError, match="duplicate option texts"):
        load_questions(path)


def test_roundtrip(tmp_path):
    qs = QuestionSet(
        questions=(make_mcq("q1"), make_mcq("q2", m=5, gold=5), make_numeric("n1", "3.5"))
    )
    path = tmp_path / "out.jsonl"
    save_questions(qs, path)
    reloaded = load_questions(path)
    assert reloaded == qs


def test_numeric_gold_must_parse(tmp_path):
    path = tmp_path / "q.jsonl"
    write_lines(path, [{"id": "n1", "kind": "numeric", "stem": "s", "gold": "not-a-number"}])
    with pytest.raises(CorpusError, match="does not parse"):
        load_questions(path)


def test_split_sizes_and_determinism(small_set):
    a, b = split_set(small_set, 0.8, seed=7)
    assert (a.n, b.n) == (8, 2)
    a2, b2 = split_set(small_set, 0.8, seed=7)
    assert a == a2 and b == b2


def test_split_empty_part_rejected():
    qs = QuestionSet(questions=(make_mcq("only"),))
    with pytest.raises(CorpusError, match="empty part"):
        split_set(qs, 0.5, seed=0)


@given(
    n=st.integers(min_value=2, max_value=40),
    fraction=st.floats(min_value=0.05, max_value=0.95),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_split_partition_property(n, fraction, seed):
    qs = QuestionSet(questions=tuple(make_mcq(qid=f"q{i}") for i in range(n)))
    try:
        a, b = split_set(qs, fraction, seed)
    except CorpusError:
        expected = int(round(fraction * n))
        assert expected < 1 or expected > n - 1
        return
    ids_a = {q.id for q in a.questions}
    ids_b = {q.id for q in b.questions}
    assert not ids_a & ids_b
    assert ids_a | ids_b == {q.id for q in qs.questions}
    assert a.n + b.n == n


def test_question_to_dict_matches_schema(mcq_question):
    obj = question_to_dict(mcq_question)
    assert set(obj) == {"id", "kind", "stem", "options", "gold", "tags"}
    assert all(set(o) == {"text"} for o in obj["options"])
