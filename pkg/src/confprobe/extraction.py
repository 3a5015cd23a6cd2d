"""Pull the final answer out of generated text and judge its correctness.

MCQ matching precedence, last match wins within a rule:

1. answer phrases ("the correct answer is B", "answer: iv", ...), with the
   label optionally wrapped in parentheses or followed by punctuation / the
   option text;
2. a lone label token on the final nonempty line ("B", "(b)", "iii.");
3. a unique option-text substring match.

Anything else is an extraction failure, which is a value (judged incorrect),
never an exception. Phrase patterns live in ``resources/answer_phrases.txt``
and can be overridden per deployment, e.g. to add language-specific wording.

Labels are matched case-sensitively when the label style distinguishes case
(upper vs lower letters, upper vs lower roman numerals); the surrounding
phrase is always case-insensitive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING

from .corpus import KIND_MCQ, Question, normalize_text

if TYPE_CHECKING:
    from .mutation import PresentedQuestion

MATCH_ANSWER_PHRASE = "answer_phrase"
MATCH_LONE_LABEL = "lone_label"
MATCH_OPTION_TEXT = "option_text"
MATCH_LAST_NUMBER = "last_number"
MATCH_NONE = "none"

KIND_LABEL = "mcq_label"
KIND_NUMBER = "numeric"
KIND_FAILURE = "failure"


@dataclass(frozen=True, slots=True)
class ExtractedAnswer:
    kind: str
    presented_label: str | None = None
    canonical_index: int | None = None  # 0 means a distractor was chosen
    numeric_value: str | None = None
    matched_by: str = MATCH_NONE

    @property
    def is_failure(self) -> bool:
        return self.kind == KIND_FAILURE


FAILURE = ExtractedAnswer(kind=KIND_FAILURE)

_DEFAULT_PHRASE_RESOURCE = "answer_phrases.txt"

# Markers that introduce a final numeric answer; matched case-insensitively,
# the last occurrence wins.
_NUMERIC_MARKERS = ("####", "answer is", "answer:", "答案是")

_NUMBER_RE = re.compile(r"[-+]?[$€£¥￥]?(?:\d[\d,]*(?:\.\d+)?|\.\d+)")

_CURRENCY = "$€£¥￥"


@lru_cache(maxsize=1)
def _default_phrase_patterns() -> tuple[str, ...]:
    text = (
        resources.files("confprobe").joinpath("resources", _DEFAULT_PHRASE_RESOURCE)
    ).read_text(encoding="utf-8")
    return _parse_phrase_lines(text)


def _parse_phrase_lines(text: str) -> tuple[str, ...]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    if not out:
        raise ValueError("phrase pattern list is empty")
    return tuple(out)


def load_phrase_patterns(path: str | Path | None = None) -> list[str]:
    """Answer-phrase regex fragments, one per line; ``#`` lines are comments."""
    if path is None:
        return list(_default_phrase_patterns())
    return list(_parse_phrase_lines(Path(path).read_text(encoding="utf-8")))


def _label_group(labels: tuple[str, ...]) -> str:
    # Longest-first so "iv" is not swallowed by "i" at the same position.
    parts = sorted((re.escape(l) for l in labels), key=len, reverse=True)
    return "(" + "|".join(parts) + ")"


@lru_cache(maxsize=512)
def _compile_phrase_patterns(
    phrases: tuple[str, ...], labels: tuple[str, ...]
) -> tuple[re.Pattern, ...]:
    group = _label_group(labels)
    # Phrase fragment is case-insensitive; the label group obeys style case.
    tail = r"(?=[\s.,)）:;!?。，、]|$)"
    return tuple(
        re.compile(rf"(?i:{phrase})\s*[\(（]?{group}[\)）]?{tail}")
        for phrase in phrases
    )


@lru_cache(maxsize=512)
def _lone_label_pattern(labels: tuple[str, ...]) -> re.Pattern:
    group = _label_group(labels)
    return re.compile(rf"^[\(（]?{group}[\)）]?[.。]?$")


def extract_mcq(
    text: str,
    variant: "PresentedQuestion",
    phrases: list[str] | None = None,
) -> ExtractedAnswer:
    """Extract the chosen option label from ``text`` against a rendered variant."""
    labels = tuple(label for label, _ in variant.presented_options)
    if not labels or not text:
        return FAILURE
    phrase_key = _default_phrase_patterns() if phrases is None else tuple(phrases)

    def result(label: str, rule: str) -> ExtractedAnswer:
        return ExtractedAnswer(
            kind=KIND_LABEL,
            presented_label=label,
            canonical_index=variant.answer_key[label],
            matched_by=rule,
        )

    # Rule 1: answer phrases; the last match anywhere in the text wins.
    last: tuple[int, str] | None = None
    for pat in _compile_phrase_patterns(phrase_key, labels):
        for m in pat.finditer(text):
            if last is None or m.start() >= last[0]:
                last = (m.start(), m.group(1))
    if last is not None:
        return result(last[1], MATCH_ANSWER_PHRASE)

    # Rule 2: a lone label on the final nonempty line.
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if lines:
        m = _lone_label_pattern(labels).match(lines[-1])
        if m:
            return result(m.group(1), MATCH_LONE_LABEL)

    # Rule 3: exactly one option text occurs as a substring.
    norm_text = normalize_text(text)
    hits = [
        label
        for label, opt_text in variant.presented_options
        if normalize_text(opt_text) in norm_text
    ]
    if len(hits) == 1:
        return result(hits[0], MATCH_OPTION_TEXT)

    return FAILURE


def normalize_numeric(raw: str) -> str | None:
    """Canonical form of a numeric answer, or None if it does not parse.

    Strips whitespace, thousands commas, a leading '+', and surrounding
    currency symbols; drops trailing fractional zeros ("42.0" -> "42").
    Idempotent: normalize(normalize(x)) == normalize(x).
    """
    s = raw.strip().strip(_CURRENCY).strip()
    if s.startswith("+"):
        s = s[1:]
    s = s.replace(",", "")
    if not s:
        return None
    try:
        d = Decimal(s)
    except InvalidOperation:
        return None
    if d == 0:
        return "0"
    return format(d.normalize(), "f")


def extract_numeric(text: str) -> ExtractedAnswer:
    """Extract the final numeric answer from generated text.

    Prefers the first number after the last final-answer marker; falls back
    to the last number anywhere in the text.
    """
    if not text:
        return FAILURE
    lowered = text.casefold()
    candidate: str | None = None
    marker_pos = -1
    for marker in _NUMERIC_MARKERS:
        pos = lowered.rfind(marker)
        if pos > marker_pos:
            m = _NUMBER_RE.search(text, pos + len(marker))
            if m:
                marker_pos = pos
                candidate = m.group(0)
    if candidate is None:
        matches = _NUMBER_RE.findall(text)
        if not matches:
            return FAILURE
        candidate = matches[-1]
    value = normalize_numeric(candidate)
    if value is None:
        return FAILURE
    return ExtractedAnswer(kind=KIND_NUMBER, numeric_value=value, matched_by=MATCH_LAST_NUMBER)


def judge(extracted: ExtractedAnswer, q: Question, variant: "PresentedQuestion | None") -> int:
    """Correctness of an extracted answer: 1 or 0. Failures and distractors are 0."""
    if extracted.is_failure:
        return 0
    if q.kind == KIND_MCQ:
        if variant is None or variant.question_id != q.id:
            raise ValueError(f"variant does not belong to question {q.id!r}")
        if extracted.kind != KIND_LABEL:
            return 0
        return 1 if variant.answer_key.get(extracted.presented_label) == q.gold else 0
    if extracted.kind != KIND_NUMBER:
        return 0
    return 1 if extracted.numeric_value == normalize_numeric(str(q.gold)) else 0


def option_score(extracted: ExtractedAnswer, q: Question) -> int | None:
    """Score of the chosen option on the question's canonical 1..m scale.

    Distractors score m+1 (on-scale, never colliding with a real option);
    extraction failures score None and are excluded from dispersion measures.
    """
    if q.kind != KIND_MCQ:
        raise ValueError("option_score applies to mcq questions only")
    if extracted.is_failure or extracted.kind != KIND_LABEL:
        return None
    if extracted.canonical_index == 0:
        return q.option_count + 1
    return extracted.canonical_index
