import json

import pytest

from confprobe.extraction import ExtractedAnswer, FAILURE
from confprobe.records import (
    AnswerRecord,
    DuplicateRecordError,
    RecordWriter,
    StoreError,
    group_histories,
    load_records,
)
from confprobe.sampling import DEFAULT_PROFILES


def record(qid="q1", idx=0, p=0, failed=False, label="A", canonical=1):
    extracted = FAILURE if failed else ExtractedAnswer(
        kind="mcq_label", presented_label=label, canonical_index=canonical,
        matched_by="answer_phrase",
    )
    return AnswerRecord(
        question_id=qid,
        draw_index=idx,
        raw_text="" if failed else f"The answer is {label}",
        extracted=extracted,
        p=p,
        variant_digest="abc123",
        profile=DEFAULT_PROFILES[0],
        backend="simulator",
        timestamp=0.0,
        failed=failed,
    )


def test_append_and_roundtrip(tmp_path):
    path = tmp_path / "records.jsonl"
    r = record(p=1)
    with RecordWriter(path) as w:
        w.append(r)
    loaded, truncated = load_records(path)
    assert not truncated
    assert loaded == [r]


def test_duplicate_key_rejected(tmp_path):
    path = tmp_path / "records.jsonl"
    with RecordWriter(path) as w:
        w.append(record(idx=3))
        with pytest.raises(DuplicateRecordError):
            w.append(record(idx=3))


def test_many_appends_load_in_draw_order(tmp_path):
    path = tmp_path / "records.jsonl"
    with RecordWriter(path) as w:
        for i in range(10_000):
            w.append(record(qid=f"q{i % 7}", idx=i))
    loaded, _ = load_records(path)
    assert len(loaded) == 10_000
    assert [r.draw_index for r in loaded] == list(range(10_000))


def test_failed_draw_must_be_incorrect():
    with pytest.raises(ValueError):
        record(p=1, failed=True)


def test_truncated_tail_tolerated(tmp_path):
    path = tmp_path / "records.jsonl"
    with RecordWriter(path) as w:
        w.append(record(idx=0))
        w.append(record(idx=1))
    raw = path.read_text(encoding="utf-8")
    path.write_text(raw + '{"question_id": "q1", "draw', encoding="utf-8")
    loaded, truncated = load_records(path)
    assert truncated
    assert [r.draw_index for r in loaded] == [0, 1]


def test_unterminated_final_line_dropped(tmp_path):
    path = tmp_path / "records.jsonl"
    with RecordWriter(path) as w:
        w.append(record(idx=0))
        w.append(record(idx=1))
    raw = path.read_text(encoding="utf-8")
    path.write_text(raw.rstrip("\n"), encoding="utf-8")  # cut the newline
    loaded, truncated = load_records(path)
    assert truncated
    assert [r.draw_index for r in loaded] == [0]


def test_mid_file_damage_is_hard_error(tmp_path):
    path = tmp_path / "records.jsonl"
    lines = [json.dumps(record(idx=0).to_dict()), "{bad}", json.dumps(record(idx=2).to_dict())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(StoreError, match=":2"):
        load_records(path)


def test_resume_truncates_and_skips_existing(tmp_path):
    path = tmp_path / "records.jsonl"
    with RecordWriter(path) as w:
        w.append(record(idx=0))
        w.append(record(idx=1))
    path.write_text(path.read_text(encoding="utf-8") + "{partial", encoding="utf-8")
    with RecordWriter(path, resume=True) as w:
        assert w.existing_keys == {("q1", 0), ("q1", 1)}
        w.append(record(idx=2))
    loaded, truncated = load_records(path)
    assert not truncated
    assert [r.draw_index for r in loaded] == [0, 1, 2]


def test_fresh_writer_refuses_existing_file(tmp_path):
    path = tmp_path / "records.jsonl"
    with RecordWriter(path) as w:
        w.append(record())
    with pytest.raises(StoreError, match="append-only"):
        RecordWriter(path)


def test_group_histories_counts():
    records = []
    idx = 0
    for qid, pattern in (("q1", [1, 1, 0, 1]), ("q2", [0, 0, 0, 0]), ("q3", [1, 1, 1, 1])):
        for p in pattern:
            records.append(record(qid=qid, idx=idx, p=p))
            idx += 1
    histories = group_histories(records)
    assert [h.question_id for h in histories] == ["q1", "q2", "q3"]
    assert all(len(h.records) == 4 for h in histories)
    by_id = {h.question_id: h for h in histories}
    assert by_id["q1"].f == 3 and by_id["q1"].k_effective == 4
    assert by_id["q2"].f == 0


def test_group_histories_excludes_failed_from_k(caplog):
    import logging

    records = [record(qid="q", idx=i, p=1) for i in range(4)]
    records.append(record(qid="q", idx=4, failed=True))
    with caplog.at_level(logging.WARNING):
        histories = group_histories(records)
    h = histories[0]
    assert h.k_effective == 4
    assert h.f == 4
    assert len(h.records) == 5
    assert caplog.text == ""  # 1/5 = 20%, not strictly above the threshold

    heavy = [record(qid="q", idx=i, p=1) for i in range(4)]
    heavy += [record(qid="q", idx=4 + i, failed=True) for i in range(2)]
    with caplog.at_level(logging.WARNING):
        group_histories(heavy)
    assert "lost 2/6 draws" in caplog.text


def test_history_conservation():
    records = [record(qid=f"q{i % 3}", idx=i) for i in range(30)]
    histories = group_histories(records)
    assert sum(len(h.records) for h in histories) == 30
