"""Question corpus: canonical storage, validation, and train/test splitting.

Questions live in a line-delimited JSON file, one object per line:

    {"id": "...", "kind": "mcq", "stem": "...",
     "options": [{"text": "..."}, ...], "gold": 2, "tags": ["..."]}

For ``mcq`` questions ``gold`` is the 1-based index of the correct option;
for ``numeric`` questions it is the exact answer as a string.  Options keep
their source order; all presentation-time shuffling and relabeling happens in
:mod:`confprobe.mutation` and is never written back, so gold keys stay stable.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

KIND_MCQ = "mcq"
KIND_NUMERIC = "numeric"
KINDS = (KIND_MCQ, KIND_NUMERIC)

MIN_OPTIONS = 2
MAX_OPTIONS = 26


class CorpusError(ValueError):
    """A question file or question set violates the corpus schema."""


def normalize_text(s: str) -> str:
    """Case- and whitespace-insensitive normal form used for uniqueness checks."""
    return " ".join(s.split()).casefold()


@dataclass(frozen=True, slots=True)
class Option:
    """One answer option. ``canonical_index`` is the 1-based source position;
    injected distractors carry index 0 and ``is_distractor=True``."""

    canonical_index: int
    text: str
    is_distractor: bool = False


@dataclass(frozen=True, slots=True)
class Question:
    id: str
    kind: str
    stem: str
    options: tuple[Option, ...] = ()
    gold: int | str = 0
    tags: tuple[str, ...] = ()

    @property
    def option_count(self) -> int:
        return len(self.options)

    def gold_option(self) -> Option:
        if self.kind != KIND_MCQ:
            raise CorpusError(f"question {self.id!r} has no gold option (kind={self.kind})")
        return self.options[int(self.gold) - 1]

    def validate(self) -> None:
        if not self.id:
            raise CorpusError("question id must be nonempty")
        if self.kind not in KINDS:
            raise CorpusError(f"question {self.id!r}: unknown kind {self.kind!r}")
        if not self.stem.strip():
            raise CorpusError(f"question {self.id!r}: empty stem")
        if self.kind == KIND_MCQ:
            m = len(self.options)
            if not MIN_OPTIONS <= m <= MAX_OPTIONS:
                raise CorpusError(
                    f"question {self.id!r}: {m} options, need {MIN_OPTIONS}..{MAX_OPTIONS}"
                )
            indices = [o.canonical_index for o in self.options]
            if indices != list(range(1, m + 1)):
                raise CorpusError(f"question {self.id!r}: option indices not contiguous 1..{m}")
            for o in self.options:
                if not o.text.strip():
                    raise CorpusError(f"question {self.id!r}: empty option text")
            norm = [normalize_text(o.text) for o in self.options]
            if len(set(norm)) != m:
                raise CorpusError(f"question {self.id!r}: duplicate option texts")
            if not isinstance(self.gold, int) or isinstance(self.gold, bool):
                raise CorpusError(f"question {self.id!r}: mcq gold must be an integer index")
            if not 1 <= self.gold <= m:
                raise CorpusError(f"question {self.id!r}: gold out of range (gold={self.gold}, m={m})")
        else:
            if self.options:
                raise CorpusError(f"question {self.id!r}: numeric question must not carry options")
            if not isinstance(self.gold, str) or not self.gold.strip():
                raise CorpusError(f"question {self.id!r}: numeric gold must be a nonempty string")
            from .extraction import normalize_numeric

            if normalize_numeric(self.gold) is None:
                raise CorpusError(f"question {self.id!r}: numeric gold {self.gold!r} does not parse")


@dataclass(frozen=True, slots=True)
class QuestionSet:
    questions: tuple[Question, ...]

    @property
    def n(self) -> int:
        return len(self.questions)

    def by_id(self) -> dict[str, Question]:
        return {q.id: q for q in self.questions}


def question_from_dict(obj: dict, where: str = "") -> Question:
    """Build and validate a Question from its on-disk dict form."""
    try:
        kind = obj["kind"]
        raw_options = obj.get("options", []) or []
        options = tuple(
            Option(canonical_index=i + 1, text=str(o["text"]))
            for i, o in enumerate(raw_options)
        )
        q = Question(
            id=str(obj["id"]),
            kind=kind,
            stem=str(obj["stem"]),
            options=options,
            gold=obj["gold"],
            tags=tuple(str(t) for t in obj.get("tags", [])),
        )
    except KeyError as exc:
        raise CorpusError(f"{where}missing field {exc.args[0]!r}") from None
    q.validate()
    return q


def question_to_dict(q: Question) -> dict:
    obj: dict = {"id": q.id, "kind": q.kind, "stem": q.stem}
    if q.kind == KIND_MCQ:
        obj["options"] = [{"text": o.text} for o in q.options]
    obj["gold"] = q.gold
    obj["tags"] = list(q.tags)
    return obj


def load_questions(path: str | Path) -> QuestionSet:
    """Load and validate a question set, preserving file order.

    Raises CorpusError with the offending line number on parse or
    validation failure, and on duplicate ids.
    """
    path = Path(path)
    questions: list[Question] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            q = question_from_dict(obj, where=f"{path}:{lineno}: ")
            if q.id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate question id {q.id!r}")
            seen.add(q.id)
            questions.append(q)
    if not questions:
        raise CorpusError(f"{path}: empty question set")
    return QuestionSet(questions=tuple(questions))


def save_questions(qs: QuestionSet, path: str | Path) -> None:
    """Write a question set in the canonical line-delimited format."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for q in qs.questions:
            fh.write(json.dumps(question_to_dict(q), ensure_ascii=False) + "\n")


def split_set(qs: QuestionSet, fraction: float, seed: int) -> tuple[QuestionSet, QuestionSet]:
    """Deterministic disjoint split; the first part holds ~``fraction`` of the set.

    Both parts keep the original corpus order. Raises CorpusError if either
    part would be empty.
    """
    if not 0.0 < fraction < 1.0:
        raise CorpusError(f"split fraction must be in (0,1), got {fraction}")
    n = qs.n
    n_first = int(round(fraction * n))
    if n_first < 1 or n_first > n - 1:
        raise CorpusError(f"fraction {fraction} on {n} questions produces an empty part")
    indices = list(range(n))
    random.Random(seed).shuffle(indices)
    first = sorted(indices[:n_first])
    second = sorted(indices[n_first:])
    return (
        QuestionSet(questions=tuple(qs.questions[i] for i in first)),
        QuestionSet(questions=tuple(qs.questions[i] for i in second)),
    )


def corpus_digest(path: str | Path) -> str:
    """Content hash of the corpus file, recorded in run manifests."""
    import hashlib

    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
