"""Turn question histories into confidence-annotated instruction data.

Every training row is a `<prompt, answer + confidence>` pair. The confidence
is the question's empirical correct-rate f/k over its usable draws, rendered
as "My confidence is X%." with one decimal (trailing ".0" dropped). The three
history cases map to:

* all answers correct / partially correct: the response states the gold
  answer followed by the confidence statement;
* all answers wrong: the response carries one of the model's own incorrect
  answers with confidence 0, and the row is loss-masked so a fine-tune never
  learns the wrong content, only sees the low-confidence shape.

A small pool of rephrased elicitation instructions (seeded by one canonical
prompt, optionally expanded by a helper model and cached) is cycled across
rows to vary the prompt wording.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .client import derive_seed
from .corpus import KIND_MCQ, Question
from .mutation import TEMPLATE_CONFIDENCE, identity_spec, render_prompt
from .records import QuestionHistory

log = logging.getLogger(__name__)

CASE_ALL_CORRECT = "all_correct"
CASE_PARTIAL = "partial"
CASE_ALL_WRONG = "all_wrong"

SEED_INSTRUCTION = (
    "For the following question, please provide your answer and your "
    "confidence about this answer."
)

REPHRASE_REQUEST = (
    "Rephrase the following instruction without changing its meaning. "
    "Answer with the rephrased instruction only.\n\n{instruction}"
)

CONFIDENCE_GRID = tuple(i / 10 for i in range(11))


class LabelingError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class InstructionRecord:
    prompt: str
    response: str
    confidence: float
    loss_masked: bool
    case: str
    question_id: str

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "response": self.response,
            "confidence": self.confidence,
            "loss_masked": self.loss_masked,
            "case": self.case,
            "question_id": self.question_id,
        }


def compute_confidence(h: QuestionHistory) -> float:
    """Empirical correct-rate f/k over the question's usable draws."""
    k = h.k_effective
    if k < 1:
        raise LabelingError(f"question {h.question_id} has no usable draws")
    return h.f / k


def format_confidence_statement(conf: float) -> str:
    """Render a confidence in [0,1] as `My confidence is X%.`

    The percentage is rounded half-up to one decimal; a trailing ".0" is
    dropped ("70%", not "70.0%").
    """
    if not 0.0 <= conf <= 1.0:
        raise LabelingError(f"confidence {conf} outside [0,1]")
    pct = (Decimal(repr(conf)) * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    text = format(pct, "f")
    if text.endswith(".0"):
        text = text[:-2]
    return f"My confidence is {text}%."


def _case_for(h: QuestionHistory) -> str:
    k = h.k_effective
    if h.f == 0:
        return CASE_ALL_WRONG
    if h.f == k:
        return CASE_ALL_CORRECT
    return CASE_PARTIAL


def gold_answer_statement(q: Question, templates: dict[str, str] | None = None) -> str:
    if q.kind == KIND_MCQ:
        rendering = render_prompt(q, identity_spec(q), templates=templates)
        gold_text = q.gold_option().text
        return f"The correct answer is {rendering.gold_label}. {gold_text}."
    return f"The correct answer is {q.gold}."


def _sample_wrong_text(h: QuestionHistory, rng: random.Random) -> str:
    wrong = [r for r in h.records if not r.failed and r.p == 0]
    if not wrong:
        raise LabelingError(f"question {h.question_id} has no usable incorrect answer")
    return rng.choice(wrong).raw_text.strip()


def emit_instruction(
    h: QuestionHistory,
    q: Question,
    instruction: str = SEED_INSTRUCTION,
    templates: dict[str, str] | None = None,
    rng: random.Random | None = None,
) -> InstructionRecord:
    """One training row for a question's history.

    The prompt is the confidence-expression rendering of the question (no
    mutations); the response ends with the formatted confidence statement.
    """
    if rng is None:
        rng = random.Random(0)
    case = _case_for(h)
    rendering = render_prompt(
        q, identity_spec(q, template_id=TEMPLATE_CONFIDENCE),
        templates=templates, instruction=instruction,
    )
    if case == CASE_ALL_WRONG:
        confidence = 0.0
        body = _sample_wrong_text(h, rng)
    else:
        confidence = compute_confidence(h)
        body = gold_answer_statement(q, templates=templates)
    statement = format_confidence_statement(confidence)
    sep = "" if not body else ("\n" if "\n" in body else " ")
    return InstructionRecord(
        prompt=rendering.prompt_text,
        response=f"{body}{sep}{statement}",
        confidence=confidence,
        loss_masked=case == CASE_ALL_WRONG,
        case=case,
        question_id=q.id,
    )


def random_confidence(
    h: QuestionHistory,
    q: Question,
    seed: int,
    instruction: str = SEED_INSTRUCTION,
    templates: dict[str, str] | None = None,
) -> InstructionRecord:
    """Ablation-baseline row: the answer portion of a normal row, but the
    stated confidence drawn uniformly from {0.0, 0.1, ..., 1.0}.

    Loss-masked all-wrong rows keep confidence 0: they carry the model's own
    wrong text and never contribute to the loss, so randomizing them would
    only corrupt the row invariant.
    """
    rng = random.Random(seed)
    base = emit_instruction(h, q, instruction=instruction, templates=templates, rng=rng)
    if base.loss_masked:
        return base
    confidence = rng.choice(CONFIDENCE_GRID)
    old = format_confidence_statement(base.confidence)
    new = format_confidence_statement(confidence)
    assert base.response.endswith(old)
    return InstructionRecord(
        prompt=base.prompt,
        response=base.response[: -len(old)] + new,
        confidence=confidence,
        loss_masked=False,
        case=base.case,
        question_id=base.question_id,
    )


def rephrase_prompt_pool(
    client=None,
    pool_size: int = 5,
    cache_path: str | Path | None = None,
) -> list[str]:
    """Elicitation instructions: the seed prompt plus helper-model rephrasings.

    The pool is cached to disk so later runs make zero helper calls; with no
    client (or a failing one) the pool is just the seed prompt.
    """
    if cache_path is not None:
        cache_path = Path(cache_path)
        if cache_path.exists():
            pool = [
                line
                for line in cache_path.read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]
            if pool:
                return pool
    pool = [SEED_INSTRUCTION]
    if client is not None:
        for _ in range(pool_size - 1):
            try:
                text = client.generate(
                    REPHRASE_REQUEST.format(instruction=SEED_INSTRUCTION)
                ).strip()
            except Exception as exc:
                log.warning("prompt rephrasing failed (%s); pool stays at %d", exc, len(pool))
                break
            if text and text not in pool:
                pool.append(text)
    if cache_path is not None and len(pool) > 1:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text("\n".join(pool) + "\n", encoding="utf-8")
    return pool


def emit_dataset(
    histories: list[QuestionHistory],
    questions: dict[str, Question],
    pool: list[str] | None = None,
    seed: int = 0,
    baseline_random: bool = False,
    per_draw: bool = False,
    templates: dict[str, str] | None = None,
) -> list[InstructionRecord]:
    """All training rows for a run, cycling the instruction pool across rows.

    ``per_draw`` duplicates each question's row once per usable draw (for
    ablations); the default emits one row per question.
    """
    if pool is None or not pool:
        pool = [SEED_INSTRUCTION]
    rows: list[InstructionRecord] = []
    emitted = 0
    for h in histories:
        q = questions.get(h.question_id)
        if q is None:
            raise LabelingError(f"history references unknown question {h.question_id!r}")
        if h.k_effective < 1:
            log.warning("question %s dropped: no usable draws", h.question_id)
            continue
        copies = h.k_effective if per_draw else 1
        for _ in range(copies):
            instruction = pool[emitted % len(pool)]
            row_seed = derive_seed(seed, emitted, tag=f"label:{h.question_id}")
            if baseline_random:
                rows.append(
                    random_confidence(h, q, seed=row_seed, instruction=instruction,
                                      templates=templates)
                )
            else:
                rows.append(
                    emit_instruction(h, q, instruction=instruction, templates=templates,
                                     rng=random.Random(row_seed))
                )
            emitted += 1
    return rows


def write_instruction_file(rows: list[InstructionRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict(), ensure_ascii=False) + "\n")


def load_instruction_file(path: str | Path) -> list[InstructionRecord]:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            rows.append(
                InstructionRecord(
                    prompt=obj["prompt"],
                    response=obj["response"],
                    confidence=float(obj["confidence"]),
                    loss_masked=bool(obj["loss_masked"]),
                    case=obj["case"],
                    question_id=obj["question_id"],
                )
            )
    return rows
