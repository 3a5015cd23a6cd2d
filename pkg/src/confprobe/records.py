"""Append-only JSONL store of answer records and per-question histories.

One line per draw, written in draw order by a single writer. Files are
line-buffered so a crash loses at most the final partial line; loading
tolerates (and reports) a truncated tail, and the writer truncates it before
resuming so a restarted run continues from the last complete record.
Records are never mutated or deleted; re-runs write new files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .extraction import ExtractedAnswer
from .sampling import DecodingProfile

log = logging.getLogger(__name__)

# Questions losing more than this fraction of draws to backend failures get flagged.
FAILURE_WARN_FRACTION = 0.2


class StoreError(RuntimeError):
    pass


class DuplicateRecordError(StoreError):
    pass


@dataclass(frozen=True, slots=True)
class AnswerRecord:
    question_id: str
    draw_index: int
    raw_text: str
    extracted: ExtractedAnswer
    p: int  # 1 correct, 0 incorrect; always 0 for failed draws
    variant_digest: str
    profile: DecodingProfile
    backend: str
    timestamp: float
    failed: bool = False

    def __post_init__(self):
        if self.p not in (0, 1):
            raise ValueError("p must be 0 or 1")
        if self.failed and self.p != 0:
            raise ValueError("failed draws cannot be correct")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "draw_index": self.draw_index,
            "raw_text": self.raw_text,
            "extracted": {
                "kind": self.extracted.kind,
                "presented_label": self.extracted.presented_label,
                "canonical_index": self.extracted.canonical_index,
                "numeric_value": self.extracted.numeric_value,
                "matched_by": self.extracted.matched_by,
            },
            "p": self.p,
            "variant_digest": self.variant_digest,
            "profile": self.profile.to_dict(),
            "backend": self.backend,
            "timestamp": self.timestamp,
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AnswerRecord":
        ex = obj["extracted"]
        return cls(
            question_id=obj["question_id"],
            draw_index=int(obj["draw_index"]),
            raw_text=obj["raw_text"],
            extracted=ExtractedAnswer(
                kind=ex["kind"],
                presented_label=ex["presented_label"],
                canonical_index=ex["canonical_index"],
                numeric_value=ex["numeric_value"],
                matched_by=ex["matched_by"],
            ),
            p=int(obj["p"]),
            variant_digest=obj["variant_digest"],
            profile=DecodingProfile.from_dict(obj["profile"]),
            backend=obj["backend"],
            timestamp=float(obj["timestamp"]),
            failed=bool(obj["failed"]),
        )


@dataclass(slots=True)
class QuestionHistory:
    question_id: str
    records: list[AnswerRecord] = field(default_factory=list)
    fuzziness: float | None = None

    @property
    def k_effective(self) -> int:
        """Usable draws: everything the backend actually answered."""
        return sum(1 for r in self.records if not r.failed)

    @property
    def f(self) -> int:
        return sum(r.p for r in self.records)


def load_records(path: str | Path) -> tuple[list[AnswerRecord], bool]:
    """Load all complete records; returns (records, tail_truncated).

    A damaged or unterminated final line is dropped and reported; damage
    anywhere else is a hard error with the line number.
    """
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    lines = raw.split("\n")
    unterminated = lines and lines[-1] != ""
    if not unterminated:
        lines = lines[:-1]
    records: list[AnswerRecord] = []
    truncated = False
    for i, line in enumerate(lines):
        is_last = i == len(lines) - 1
        if not line.strip():
            continue
        try:
            records.append(AnswerRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            if is_last:
                truncated = True
                log.warning("%s: dropped damaged final line (%s)", path, exc)
                continue
            raise StoreError(f"{path}:{i + 1}: damaged record ({exc})") from None
    if unterminated and lines and lines[-1].strip() and not truncated:
        # Final line parsed but had no newline: treat as incomplete.
        records.pop()
        truncated = True
        log.warning("%s: dropped unterminated final line", path)
    return records, truncated


class RecordWriter:
    """Single-writer append handle enforcing unique (question_id, draw_index)."""

    def __init__(self, path: str | Path, resume: bool = False):
        self.path = Path(path)
        self._keys: set[tuple[str, int]] = set()
        if resume and self.path.exists():
            records, truncated = load_records(self.path)
            if truncated:
                self._truncate_to(records)
            self._keys = {(r.question_id, r.draw_index) for r in records}
        elif self.path.exists() and self.path.stat().st_size > 0:
            raise StoreError(f"{self.path} already exists; records are append-only")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        # Line buffering caps crash loss at one partial line.
        self._fh = self.path.open("a", encoding="utf-8", buffering=1)

    def _truncate_to(self, records: list[AnswerRecord]) -> None:
        with self.path.open("w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")

    @property
    def existing_keys(self) -> set[tuple[str, int]]:
        return set(self._keys)

    def append(self, record: AnswerRecord) -> None:
        key = (record.question_id, record.draw_index)
        if key in self._keys:
            raise DuplicateRecordError(f"record {key} already written")
        self._keys.add(key)
        self._fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def group_histories(records: list[AnswerRecord]) -> list[QuestionHistory]:
    """One history per question, records ordered by draw index, grouped in
    order of first appearance."""
    seen: dict[str, QuestionHistory] = {}
    for r in sorted(records, key=lambda r: r.draw_index):
        h = seen.get(r.question_id)
        if h is None:
            h = seen[r.question_id] = QuestionHistory(question_id=r.question_id)
        h.records.append(r)
    histories = list(seen.values())
    for h in histories:
        total = len(h.records)
        failed = total - h.k_effective
        if total and failed / total > FAILURE_WARN_FRACTION:
            log.warning(
                "question %s lost %d/%d draws to backend failures",
                h.question_id, failed, total,
            )
    return histories
