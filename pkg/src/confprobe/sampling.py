"""Two-step draw planning and answer-dispersion (fuzziness) scoring.

Phase 1 samples question ids uniformly with replacement, k*n draws in total,
each with a freshly sampled presentation variant and a decoding profile taken
round-robin from the configured list. Phase 2 re-queries only the questions
whose phase-1 answers were dispersed: strictly fuzzier than the threshold.

MCQ fuzziness is the mean absolute deviation of the chosen options' canonical
scores (1..m, distractors m+1). The raw sum-of-deviations form is identically
zero, so the dispersion is taken over absolute deviations; population variance
is available behind ``mode="variance"`` for comparison. Scores are keyed by
canonical option index, never presented position, so a perfectly consistent
responder scores 0 regardless of shuffling. Numeric fuzziness is the ratio of
distinct normalized answers to the number of usable answers.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import Question, QuestionSet
from .mutation import MutationSettings, VariantSpec, sample_variant

STRATEGY_RANDOM = "random_temperature"
STRATEGY_TOP_K = "top_k"
STRATEGY_TOP_P = "top_p"
STRATEGIES = (STRATEGY_RANDOM, STRATEGY_TOP_K, STRATEGY_TOP_P)

FUZZINESS_MAD = "mad"
FUZZINESS_VARIANCE = "variance"


@dataclass(frozen=True, slots=True)
class DecodingProfile:
    strategy: str
    temperature: float = 1.0
    k_cutoff: int | None = None
    p_cutoff: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.strategy == STRATEGY_TOP_K:
            if self.k_cutoff is None or self.k_cutoff < 1:
                raise ValueError("top_k profile needs k_cutoff >= 1")
            if self.p_cutoff is not None:
                raise ValueError("top_k profile must not set p_cutoff")
        elif self.strategy == STRATEGY_TOP_P:
            if self.p_cutoff is None or not 0 < self.p_cutoff <= 1:
                raise ValueError("top_p profile needs p_cutoff in (0,1]")
            if self.k_cutoff is not None:
                raise ValueError("top_p profile must not set k_cutoff")
        else:
            if self.k_cutoff is not None or self.p_cutoff is not None:
                raise ValueError("random_temperature profile sets temperature only")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "temperature": self.temperature,
            "k_cutoff": self.k_cutoff,
            "p_cutoff": self.p_cutoff,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DecodingProfile":
        return cls(
            strategy=obj["strategy"],
            temperature=float(obj.get("temperature", 1.0)),
            k_cutoff=obj.get("k_cutoff"),
            p_cutoff=obj.get("p_cutoff"),
        )


DEFAULT_PROFILES = (
    DecodingProfile(strategy=STRATEGY_RANDOM, temperature=1.0),
    DecodingProfile(strategy=STRATEGY_TOP_K, temperature=0.8, k_cutoff=40),
    DecodingProfile(strategy=STRATEGY_TOP_P, temperature=0.8, p_cutoff=0.9),
)


def next_profile(draw_index: int, profiles: tuple[DecodingProfile, ...]) -> DecodingProfile:
    """Round-robin profile for a global draw index."""
    if not profiles:
        raise ValueError("profile list is empty")
    return profiles[draw_index % len(profiles)]


@dataclass(frozen=True, slots=True)
class Draw:
    question_id: str
    variant: VariantSpec
    profile: DecodingProfile


@dataclass(frozen=True, slots=True)
class DrawPlan:
    draws: tuple[Draw, ...]

    @property
    def total(self) -> int:
        return len(self.draws)


def plan_draws(
    qs: QuestionSet,
    k: int,
    seed: int,
    profiles: tuple[DecodingProfile, ...] = DEFAULT_PROFILES,
    mutation: MutationSettings | None = None,
    index_offset: int = 0,
) -> DrawPlan:
    """Phase-1 plan: k*n uniform-with-replacement draws, deterministic in seed.

    ``index_offset`` keeps the profile rotation aligned when planning a
    continuation of an earlier plan.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if mutation is None:
        mutation = MutationSettings()
    mutation.validate()
    rng = random.Random(seed)
    by_index = qs.questions
    draws = []
    for i in range(k * qs.n):
        q = by_index[rng.randrange(qs.n)]
        variant = sample_variant(q, rng, mutation)
        draws.append(
            Draw(
                question_id=q.id,
                variant=variant,
                profile=next_profile(index_offset + i, profiles),
            )
        )
    return DrawPlan(draws=tuple(draws))


def fuzziness_mcq(scores: list[int], mode: str = FUZZINESS_MAD) -> float:
    """Dispersion of canonical option scores over a question's usable answers."""
    if not scores:
        raise ValueError("no scores to compute fuzziness over")
    mean = sum(scores) / len(scores)
    if mode == FUZZINESS_MAD:
        return sum(abs(x - mean) for x in scores) / len(scores)
    if mode == FUZZINESS_VARIANCE:
        return sum((x - mean) ** 2 for x in scores) / len(scores)
    raise ValueError(f"unknown fuzziness mode {mode!r}")


def fuzziness_numeric(answers: list[str]) -> float:
    """Distinct-answer ratio u/k over normalized numeric answers; in [1/k, 1]."""
    if not answers:
        raise ValueError("no answers to compute fuzziness over")
    return len(set(answers)) / len(answers)


def select_requery(
    fuzziness_by_question: dict[str, float | None],
    qs: QuestionSet,
    threshold: float,
    extra_draws: int,
    seed: int,
    profiles: tuple[DecodingProfile, ...] = DEFAULT_PROFILES,
    mutation: MutationSettings | None = None,
    index_offset: int = 0,
) -> DrawPlan:
    """Phase-2 plan: ``extra_draws`` fresh draws for every question whose
    fuzziness strictly exceeds ``threshold``.

    Questions with unknown fuzziness (no usable phase-1 answers) are skipped;
    they already surfaced as failure-heavy in the run log.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if extra_draws < 1:
        raise ValueError("extra_draws must be >= 1")
    if mutation is None:
        mutation = MutationSettings()
    mutation.validate()
    rng = random.Random(seed)
    by_id = qs.by_id()
    draws = []
    i = 0
    for q in qs.questions:  # corpus order keeps the plan deterministic
        f = fuzziness_by_question.get(q.id)
        if f is None or f <= threshold:
            continue
        for _ in range(extra_draws):
            variant = sample_variant(by_id[q.id], rng, mutation)
            draws.append(
                Draw(
                    question_id=q.id,
                    variant=variant,
                    profile=next_profile(index_offset + i, profiles),
                )
            )
            i += 1
    return DrawPlan(draws=tuple(draws))
