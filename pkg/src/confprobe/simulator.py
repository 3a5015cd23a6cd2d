"""Synthetic respondents with known per-question correctness probabilities.

Each question carries a latent probability theta of being answered correctly.
The simulator answers in the extraction-compatible template ("The correct
answer is <label>. <text>."), choosing the gold option with probability theta
and a uniformly random wrong presented option (distractors included)
otherwise; numeric questions get an offset-perturbed number when wrong.
Because theta is ground truth, the whole pipeline can be verified offline:
empirical correct-rates must concentrate around theta, and a responder that
states its own theta as confidence must come out almost perfectly calibrated.

Modes:

* ``plain`` — answers only.
* ``calibrated_responder`` — appends "My confidence is {theta*100}%."
* ``anticalibrated_responder`` — appends the complementary confidence
  (1 - theta); a worst-case fixture for calibration metrics.
* ``sycophantic`` — under a paraphrased stem the answer shifts to a decoy
  option, demonstrating what the dispersion probe detects.

Everything is deterministic in the seed passed per draw.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path

from .client import BACKEND_SIMULATOR, CompletionRequest, CompletionResponse, FatalBackendError
from .corpus import KIND_MCQ, KIND_NUMERIC, Option, Question, QuestionSet
from .extraction import normalize_numeric
from .labeling import format_confidence_statement
from .mutation import PresentedQuestion

MODE_PLAIN = "plain"
MODE_CALIBRATED = "calibrated_responder"
MODE_ANTICALIBRATED = "anticalibrated_responder"
MODE_SYCOPHANTIC = "sycophantic"
MODES = (MODE_PLAIN, MODE_CALIBRATED, MODE_ANTICALIBRATED, MODE_SYCOPHANTIC)

_NUMERIC_OFFSETS = (-3, -2, -1, 1, 2, 3)


@dataclass(frozen=True, slots=True)
class LatentModel:
    theta: dict[str, float]
    mode: str = MODE_PLAIN

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown simulator mode {self.mode!r}")
        for qid, t in self.theta.items():
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"theta for {qid!r} is {t}, outside [0,1]")

    def theta_for(self, question_id: str) -> float:
        if question_id not in self.theta:
            raise KeyError(f"no latent parameter for question {question_id!r}")
        return self.theta[question_id]

    def export(self, path: str | Path) -> None:
        """Dump the theta table for audit."""
        Path(path).write_text(
            json.dumps({"mode": self.mode, "theta": dict(sorted(self.theta.items()))},
                       indent=2, sort_keys=True)
            + "\n",
            encoding="utf-8",
        )


def make_latent(qs: QuestionSet, spec: dict, seed: int, mode: str = MODE_PLAIN) -> LatentModel:
    """Assign per-question thetas from a distribution spec, deterministically.

    Specs: {"distribution": "constant", "value": c}
           {"distribution": "uniform", "low": a, "high": b}
           {"distribution": "two_point", "low": a, "high": b, "high_weight": w}
    """
    rng = random.Random(seed)
    dist = spec.get("distribution")
    theta: dict[str, float] = {}
    if dist == "constant":
        value = float(spec["value"])
        for q in qs.questions:
            theta[q.id] = value
    elif dist == "uniform":
        low, high = float(spec.get("low", 0.0)), float(spec.get("high", 1.0))
        if not 0.0 <= low <= high <= 1.0:
            raise ValueError(f"uniform bounds [{low},{high}] invalid")
        for q in qs.questions:
            theta[q.id] = rng.uniform(low, high)
    elif dist == "two_point":
        low, high = float(spec["low"]), float(spec["high"])
        weight = float(spec.get("high_weight", 0.5))
        for q in qs.questions:
            theta[q.id] = high if rng.random() < weight else low
    else:
        raise ValueError(f"unknown latent distribution spec {spec!r}")
    return LatentModel(theta=theta, mode=mode)


def _decoy_index(q: Question) -> int:
    """A stable wrong canonical index used by the sycophantic mode."""
    from .client import derive_seed

    candidates = [i for i in range(1, q.option_count + 1) if i != q.gold]
    return candidates[derive_seed(0, q.option_count, tag=f"decoy:{q.id}") % len(candidates)]


def _wrong_numeric(q: Question, rng: random.Random) -> str:
    gold = Decimal(normalize_numeric(str(q.gold)))
    return format((gold + rng.choice(_NUMERIC_OFFSETS)).normalize(), "f")


def simulate_answer(
    q: Question,
    variant: PresentedQuestion,
    latent: LatentModel,
    seed: int,
) -> CompletionResponse:
    """One simulated answer to a rendered variant, deterministic in ``seed``."""
    theta = latent.theta_for(q.id)
    rng = random.Random(seed)

    if q.kind == KIND_MCQ:
        paraphrased = q.stem not in variant.prompt_text
        if latent.mode == MODE_SYCOPHANTIC and paraphrased:
            # Consistent-but-shifted belief: the decoy plays the role of gold.
            target = _decoy_index(q)
        else:
            target = q.gold
        choices = list(variant.presented_options)
        target_pairs = [(l, t) for l, t in choices if variant.answer_key[l] == target]
        other_pairs = [(l, t) for l, t in choices if variant.answer_key[l] != target]
        if not target_pairs:
            raise FatalBackendError(f"variant of {q.id} does not present option {target}")
        if rng.random() < theta:
            label, text = target_pairs[0]
            hit_gold = target == q.gold
        else:
            label, text = other_pairs[rng.randrange(len(other_pairs))]
            hit_gold = variant.answer_key[label] == q.gold
        answer = f"The correct answer is {label}. {text}."
        n_wrong = len(choices) - 1
        prob = theta if hit_gold else max((1.0 - theta) / max(n_wrong, 1), 1e-9)
    elif q.kind == KIND_NUMERIC:
        if rng.random() < theta:
            value = normalize_numeric(str(q.gold))
            hit_gold = True
        else:
            value = _wrong_numeric(q, rng)
            hit_gold = False
        answer = f"The answer is {value}."
        prob = theta if hit_gold else max(1.0 - theta, 1e-9)
    else:
        raise FatalBackendError(f"cannot simulate question kind {q.kind!r}")

    if latent.mode == MODE_CALIBRATED:
        answer += " " + format_confidence_statement(theta)
    elif latent.mode == MODE_ANTICALIBRATED:
        answer += " " + format_confidence_statement(1.0 - theta)

    return CompletionResponse(
        text=answer,
        first_token_probability=min(prob, 1.0),
        backend=BACKEND_SIMULATOR,
        latency=0.0,
    )


class SimulatorBackend:
    """Backend adapter running the latent respondent behind ``complete()``.

    Requests must carry the question, rendered variant, and per-draw seed;
    the dispatcher derives seeds from draw indices, so results do not depend
    on scheduling.
    """

    name = BACKEND_SIMULATOR

    def __init__(self, latent: LatentModel):
        self.latent = latent

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if request.question is None or request.variant is None or request.seed is None:
            raise FatalBackendError(
                f"{request.request_id}: simulator requests need question, variant, and seed"
            )
        return simulate_answer(request.question, request.variant, self.latent, request.seed)


def make_synthetic_questions(
    n: int,
    options_per_question: int = 4,
    seed: int = 0,
    numeric_every: int = 0,
) -> QuestionSet:
    """A synthetic corpus for offline runs and tests.

    ``numeric_every`` > 0 makes every that-many-th question numeric instead
    of multiple choice.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    questions = []
    for i in range(n):
        qid = f"syn-{i:05d}"
        if numeric_every and (i + 1) % numeric_every == 0:
            gold = rng.randrange(10, 10_000)
            questions.append(
                Question(
                    id=qid,
                    kind=KIND_NUMERIC,
                    stem=f"Compute the registered meter reading for unit {i}.",
                    gold=str(gold),
                    tags=("synthetic",),
                )
            )
            continue
        m = options_per_question
        gold = rng.randrange(1, m + 1)
        options = tuple(
            Option(canonical_index=j + 1, text=f"candidate {i}-{j + 1}")
            for j in range(m)
        )
        questions.append(
            Question(
                id=qid,
                kind=KIND_MCQ,
                stem=f"Which candidate is listed as verified for case {i}?",
                options=options,
                gold=gold,
                tags=("synthetic",),
            )
        )
    return QuestionSet(questions=tuple(questions))
