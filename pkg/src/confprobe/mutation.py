"""Mutated question renderings: shuffles, relabelings, distractors, templates.

A :class:`VariantSpec` fully describes one presentation of a question; for a
fixed (question, spec) pair :func:`render_prompt` is pure and byte-stable.
Gold preservation is the central invariant: whatever the mutation, the
rendered variant's ``answer_key`` maps its ``gold_label`` back to the
question's canonical gold index, and injected distractors are never gold.

Prompt templates are plain text files with ``{stem}``, ``{options}`` and
``{instruction}`` placeholders; the packaged defaults can be overridden with
a template directory in the pipeline config.
"""

from __future__ import annotations

import json
import logging
import random
import re
import threading
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .corpus import KIND_MCQ, Option, Question, normalize_text

log = logging.getLogger(__name__)

LABEL_UPPER = "upper"
LABEL_LOWER = "lower"
LABEL_ARABIC = "arabic"
LABEL_ROMAN_LOWER = "roman_lower"
LABEL_ROMAN_UPPER = "roman_upper"
LABEL_STYLES = (LABEL_UPPER, LABEL_LOWER, LABEL_ARABIC, LABEL_ROMAN_LOWER, LABEL_ROMAN_UPPER)

DISTRACTOR_NONE_OF_THE_ABOVE = "none_of_the_above"
DISTRACTOR_ALL_OF_THE_ABOVE = "all_of_the_above"
DISTRACTOR_TEXTS = {
    DISTRACTOR_NONE_OF_THE_ABOVE: "None of the above",
    DISTRACTOR_ALL_OF_THE_ABOVE: "All of the above",
}

TEMPLATE_TASK = "task"
TEMPLATE_COT = "cot"
TEMPLATE_FEWSHOT = "fewshot"
TEMPLATE_CONFIDENCE = "confidence"
TEMPLATE_TASK_NUMERIC = "task_numeric"
TEMPLATE_COT_NUMERIC = "cot_numeric"

_ROMAN = (
    (10, "x"), (9, "ix"), (5, "v"), (4, "iv"), (1, "i"),
)


class TemplateError(ValueError):
    """Unknown template id or malformed template file."""


def _int_to_roman(n: int) -> str:
    out = []
    for value, sym in _ROMAN:
        while n >= value:
            out.append(sym)
            n -= value
    return "".join(out)


def labels_for_style(style: str, count: int) -> list[str]:
    """The first ``count`` labels of a style's sequence.

    Raises TemplateError for an unknown style and ValueError when the count
    exceeds the style's alphabet (letter styles stop at 26).
    """
    if style in (LABEL_UPPER, LABEL_LOWER):
        if count > 26:
            raise ValueError(f"{count} options exceed the {style} letter alphabet")
        letters = [chr(ord("a") + i) for i in range(count)]
        return [l.upper() for l in letters] if style == LABEL_UPPER else letters
    if style == LABEL_ARABIC:
        return [str(i + 1) for i in range(count)]
    if style in (LABEL_ROMAN_LOWER, LABEL_ROMAN_UPPER):
        roman = [_int_to_roman(i + 1) for i in range(count)]
        return [r.upper() for r in roman] if style == LABEL_ROMAN_UPPER else roman
    raise TemplateError(f"unknown label style {style!r}")


def apply_label_style(options: list[Option], style: str) -> list[tuple[str, Option]]:
    """Pair each option (distractors included, in final position) with its label."""
    labels = labels_for_style(style, len(options))
    return list(zip(labels, options))


def shuffle_options(q: Question, seed: int) -> tuple[int, ...]:
    """Uniform-random permutation of the question's option slots (0-based),
    deterministic in ``seed``. Slot j of the presentation shows source
    option ``perm[j]``."""
    if q.kind != KIND_MCQ:
        raise ValueError(f"cannot shuffle options of a {q.kind} question")
    perm = list(range(q.option_count))
    random.Random(seed).shuffle(perm)
    return tuple(perm)


def identity_permutation(q: Question) -> tuple[int, ...]:
    return tuple(range(q.option_count))


def add_distractors(q: Question, which: tuple[str, ...]) -> list[Option]:
    """Distractor options to append after the real ones, in listed order.

    A distractor whose text collides with an existing option is skipped with
    a warning; distractors are never the gold answer.
    """
    existing = {normalize_text(o.text) for o in q.options}
    out: list[Option] = []
    for name in which:
        text = DISTRACTOR_TEXTS.get(name)
        if text is None:
            raise ValueError(f"unknown distractor {name!r}")
        if normalize_text(text) in existing:
            log.warning("question %s already has an option %r; distractor skipped", q.id, text)
            continue
        out.append(Option(canonical_index=0, text=text, is_distractor=True))
    return out


@dataclass(frozen=True, slots=True)
class VariantSpec:
    """One presentation recipe: relabeling, shuffling, distractors, template."""

    label_style: str = LABEL_UPPER
    permutation: tuple[int, ...] = ()
    distractors: tuple[str, ...] = ()
    template_id: str = TEMPLATE_TASK
    paraphrase_id: str | None = None
    seed: int = 0

    def digest(self) -> str:
        payload = json.dumps(
            {
                "label_style": self.label_style,
                "permutation": list(self.permutation),
                "distractors": list(self.distractors),
                "template_id": self.template_id,
                "paraphrase_id": self.paraphrase_id,
                "seed": self.seed,
            },
            sort_keys=True,
        )
        import hashlib

        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True, slots=True)
class PresentedQuestion:
    """A fully rendered prompt plus the key for judging answers against it."""

    question_id: str
    prompt_text: str
    presented_options: tuple[tuple[str, str], ...]  # (label, text) pairs
    answer_key: dict[str, int]  # presented label -> canonical index (0 = distractor)
    gold_label: str | None


def identity_spec(q: Question, template_id: str = TEMPLATE_TASK) -> VariantSpec:
    """No-op presentation: source order, upper-case labels, no distractors."""
    return VariantSpec(permutation=identity_permutation(q), template_id=template_id)


@lru_cache(maxsize=1)
def _default_templates() -> dict[str, str]:
    templates: dict[str, str] = {}
    base = resources.files("confprobe").joinpath("templates")
    for entry in base.iterdir():
        if entry.name.endswith(".txt"):
            templates[entry.name[:-4]] = entry.read_text(encoding="utf-8")
    return templates


def load_templates(template_dir: str | Path | None = None) -> dict[str, str]:
    """Template id -> template text. Defaults ship with the package; a
    directory override wins file-by-file."""
    templates = dict(_default_templates())
    if template_dir is not None:
        for path in sorted(Path(template_dir).glob("*.txt")):
            templates[path.stem] = path.read_text(encoding="utf-8")
    return templates


def _format_template(text: str, **values: str) -> str:
    try:
        rendered = text.format(**values)
    except KeyError as exc:
        raise TemplateError(f"template references unknown placeholder {exc.args[0]!r}") from None
    # Numeric questions render an empty options block; tidy the gap it leaves.
    rendered = re.sub(r"\n{3,}", "\n\n", rendered)
    return rendered.strip() + "\n"


def render_prompt(
    q: Question,
    spec: VariantSpec,
    templates: dict[str, str] | None = None,
    instruction: str | None = None,
    paraphrase_lookup=None,
) -> PresentedQuestion:
    """Render a question under a variant spec.

    ``instruction`` fills the ``{instruction}`` placeholder of templates that
    carry one (the confidence-expression template). ``paraphrase_lookup`` maps
    ``(question_id, paraphrase_id) -> str | None``; when the spec names a
    paraphrase that the lookup cannot supply, the original stem is used.
    """
    if templates is None:
        templates = load_templates()
    if spec.template_id not in templates:
        raise TemplateError(
            f"unknown template {spec.template_id!r}; known: {sorted(templates)}"
        )

    stem = q.stem
    if spec.paraphrase_id is not None and paraphrase_lookup is not None:
        alt = paraphrase_lookup(q.id, spec.paraphrase_id)
        if alt:
            stem = alt

    presented: list[tuple[str, str]] = []
    answer_key: dict[str, int] = {}
    gold_label: str | None = None
    options_block = ""
    if q.kind == KIND_MCQ:
        if sorted(spec.permutation) != list(range(q.option_count)):
            raise ValueError(
                f"permutation {spec.permutation} is not a bijection over "
                f"{q.option_count} option slots"
            )
        ordered = [q.options[i] for i in spec.permutation]
        ordered += add_distractors(q, spec.distractors)
        labeled = apply_label_style(ordered, spec.label_style)
        for label, opt in labeled:
            presented.append((label, opt.text))
            answer_key[label] = opt.canonical_index
            if opt.canonical_index == q.gold:
                gold_label = label
        options_block = "\n".join(f"{label}. {text}" for label, text in presented)

    prompt_text = _format_template(
        templates[spec.template_id],
        stem=stem,
        options=options_block,
        instruction=instruction or "",
    )
    return PresentedQuestion(
        question_id=q.id,
        prompt_text=prompt_text,
        presented_options=tuple(presented),
        answer_key=answer_key,
        gold_label=gold_label,
    )


@dataclass
class MutationSettings:
    """Which mutations are enabled when sampling fresh variants."""

    label_styles: tuple[str, ...] = (LABEL_UPPER,)
    shuffle: bool = True
    distractors: tuple[str, ...] = ()
    templates_mcq: tuple[str, ...] = (TEMPLATE_TASK,)
    templates_numeric: tuple[str, ...] = (TEMPLATE_TASK_NUMERIC,)
    paraphrase_ids: tuple[str, ...] = ()  # empty = paraphrasing disabled

    def validate(self) -> None:
        for s in self.label_styles:
            if s not in LABEL_STYLES:
                raise ValueError(f"unknown label style {s!r}")
        for d in self.distractors:
            if d not in DISTRACTOR_TEXTS:
                raise ValueError(f"unknown distractor {d!r}")
        if not self.label_styles:
            raise ValueError("at least one label style must be enabled")
        if not self.templates_mcq or not self.templates_numeric:
            raise ValueError("at least one template per question kind must be enabled")


def sample_variant(q: Question, rng: random.Random, settings: MutationSettings) -> VariantSpec:
    """Draw a fresh VariantSpec uniformly over the enabled mutations."""
    seed = rng.getrandbits(32)
    if q.kind != KIND_MCQ:
        template = rng.choice(settings.templates_numeric)
        paraphrase = _sample_paraphrase(rng, settings)
        return VariantSpec(
            label_style=LABEL_UPPER,
            permutation=(),
            distractors=(),
            template_id=template,
            paraphrase_id=paraphrase,
            seed=seed,
        )
    style = rng.choice(settings.label_styles)
    perm = shuffle_options(q, seed) if settings.shuffle else identity_permutation(q)
    chosen = tuple(d for d in settings.distractors if rng.random() < 0.5)
    template = rng.choice(settings.templates_mcq)
    paraphrase = _sample_paraphrase(rng, settings)
    return VariantSpec(
        label_style=style,
        permutation=perm,
        distractors=chosen,
        template_id=template,
        paraphrase_id=paraphrase,
        seed=seed,
    )


def _sample_paraphrase(rng: random.Random, settings: MutationSettings) -> str | None:
    if not settings.paraphrase_ids:
        return None
    pool: list[str | None] = [None, *settings.paraphrase_ids]
    return rng.choice(pool)


class ParaphraseCache:
    """Disk-backed stem paraphrases keyed by (question_id, paraphrase_id).

    Stored as one JSON object per line: {"question_id", "paraphrase_id",
    "text"}. Writes are serialized; reads are lock-free after load.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str], str] = {}
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    self._entries[(obj["question_id"], obj["paraphrase_id"])] = obj["text"]

    def get(self, question_id: str, paraphrase_id: str) -> str | None:
        return self._entries.get((question_id, paraphrase_id))

    def put(self, question_id: str, paraphrase_id: str, text: str) -> None:
        with self._lock:
            self._entries[(question_id, paraphrase_id)] = text
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {"question_id": question_id, "paraphrase_id": paraphrase_id, "text": text},
                        ensure_ascii=False,
                    )
                    + "\n"
                )


PARAPHRASE_REQUEST = (
    "Rewrite the following question so it keeps exactly the same meaning and "
    "the same correct answer, changing only the wording.\n\n{stem}"
)


def paraphrase_stem(
    q: Question,
    client,
    cache: ParaphraseCache,
    paraphrase_id: str = "p0",
) -> str:
    """Paraphrase a stem via a helper model, consulting the cache first.

    Never blocks the pipeline: on any client failure the original stem is
    returned and a warning logged.
    """
    hit = cache.get(q.id, paraphrase_id)
    if hit is not None:
        return hit
    try:
        text = client.generate(PARAPHRASE_REQUEST.format(stem=q.stem)).strip()
    except Exception as exc:  # helper failures must not stop the run
        log.warning("paraphrase of %s failed (%s); using original stem", q.id, exc)
        return q.stem
    if not text:
        log.warning("paraphrase of %s came back empty; using original stem", q.id)
        return q.stem
    cache.put(q.id, paraphrase_id, text)
    return text
