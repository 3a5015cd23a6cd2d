"""Stage orchestration: test (probe answers), build (instruction data),
simulate (synthetic predicting-stage responses), eval (calibration report).

Every stage is driven by one :class:`~confprobe.config.PipelineConfig` and
writes into its output directory:

* ``test``     -> records.jsonl, manifest.json (+ latent.json on simulator)
* ``build``    -> instruction.jsonl, build_manifest.json
* ``simulate`` -> responses.jsonl (+ latent.json)
* ``eval``     -> report.json, bins.csv

Runs are resumable (``test`` skips draws already recorded) and, on the
simulator backend, bit-reproducible: per-draw seeds derive from draw indices
and records are written in draw order, so neither the concurrency schedule
nor a resume changes the output bytes. Simulator record timestamps are fixed
at 0.0 for the same reason; wall-clock timestamps would make otherwise
identical runs diverge.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from . import calibration as calib
from .client import (
    BACKEND_SIMULATOR,
    CompletionRequest,
    CompletionResponse,
    HttpBackend,
    complete_with_retries,
    derive_seed,
    execute_requests,
)
from .config import PipelineConfig
from .corpus import KIND_MCQ, Question, QuestionSet, corpus_digest, load_questions, split_set
from .extraction import extract_mcq, extract_numeric, judge, load_phrase_patterns, option_score
from .labeling import (
    SEED_INSTRUCTION,
    emit_dataset,
    rephrase_prompt_pool,
    write_instruction_file,
)
from .mutation import (
    TEMPLATE_CONFIDENCE,
    ParaphraseCache,
    identity_spec,
    load_templates,
    render_prompt,
)
from .records import AnswerRecord, RecordWriter, group_histories, load_records
from .sampling import (
    DecodingProfile,
    DrawPlan,
    fuzziness_mcq,
    fuzziness_numeric,
    plan_draws,
    select_requery,
)
from .simulator import LatentModel, SimulatorBackend, make_latent

log = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"
INSTRUCTION_FILE = "instruction.jsonl"
BUILD_MANIFEST_FILE = "build_manifest.json"
RESPONSES_FILE = "responses.jsonl"
REPORT_FILE = "report.json"
BINS_FILE = "bins.csv"
LATENT_FILE = "latent.json"


class PipelineError(RuntimeError):
    pass


def load_corpus_parts(cfg: PipelineConfig) -> tuple[QuestionSet, QuestionSet, QuestionSet]:
    """(full, probe part, held-out eval part). Without a split both parts
    are the full set."""
    full = load_questions(cfg.corpus.path)
    if cfg.corpus.split_fraction is None:
        return full, full, full
    train, evalp = split_set(full, cfg.corpus.split_fraction, cfg.corpus.split_seed)
    return full, train, evalp


def _latent_for(cfg: PipelineConfig, full: QuestionSet) -> LatentModel:
    return make_latent(
        full,
        cfg.backend.simulator.latent,
        seed=derive_seed(cfg.seed, 0, tag="latent"),
        mode=cfg.backend.simulator.mode,
    )


def make_backend(cfg: PipelineConfig, full: QuestionSet):
    if cfg.backend.kind == BACKEND_SIMULATOR:
        return SimulatorBackend(_latent_for(cfg, full))
    http = cfg.backend.http
    return HttpBackend(
        base_url=http.base_url or "",
        model=http.model or "",
        timeout=http.timeout,
        want_logprobs=http.logprobs,
    )


class _HttpHelper:
    """Minimal text-in/text-out adapter over the HTTP backend, used for stem
    paraphrasing and instruction-pool rephrasing."""

    def __init__(self, base_url: str, model: str, timeout: float = 30.0):
        self._backend = HttpBackend(base_url, model, timeout=timeout, want_logprobs=False)
        self._counter = 0

    def generate(self, prompt: str) -> str:
        self._counter += 1
        request = CompletionRequest(
            prompt_text=prompt,
            profile=DecodingProfile(strategy="random_temperature", temperature=1.0),
            max_tokens=256,
            request_id=f"helper-{self._counter}",
        )
        return complete_with_retries(self._backend, request, attempts=3, backoff=0.5).text


def _helper_client(cfg: PipelineConfig):
    p = cfg.mutation.paraphrase
    if p.helper_base_url and p.helper_model:
        return _HttpHelper(p.helper_base_url, p.helper_model, p.helper_timeout)
    return None


def _offline_paraphrase(stem: str, paraphrase_id: str) -> str:
    """Deterministic stand-in paraphrase for offline simulator runs. The
    first letter's case is flipped so the result never contains the original
    stem verbatim (the simulator detects paraphrases that way)."""
    for i, ch in enumerate(stem):
        if ch.isalpha():
            flipped = ch.lower() if ch.isupper() else ch.upper()
            stem = stem[:i] + flipped + stem[i + 1 :]
            break
    return f"Put differently ({paraphrase_id}): {stem}"


def _prepare_paraphrases(cfg: PipelineConfig, qs: QuestionSet) -> ParaphraseCache | None:
    """Fill the paraphrase cache for every (question, paraphrase id) pair.

    With a helper endpoint the helper does the rewriting (failures fall back
    to the original stem); offline simulator runs get deterministic synthetic
    rewordings so paraphrase-sensitive modes stay demonstrable.
    """
    p = cfg.mutation.paraphrase
    if not p.enabled:
        return None
    cache_path = p.cache_path or str(Path(cfg.out_dir) / "paraphrases.jsonl")
    cache = ParaphraseCache(cache_path)
    helper = _helper_client(cfg)
    ids = [f"p{i}" for i in range(p.per_stem)]
    from .mutation import paraphrase_stem

    for q in qs.questions:
        for pid in ids:
            if cache.get(q.id, pid) is not None:
                continue
            if helper is not None:
                paraphrase_stem(q, helper, cache, paraphrase_id=pid)
            elif cfg.backend.kind == BACKEND_SIMULATOR:
                cache.put(q.id, pid, _offline_paraphrase(q.stem, pid))
            else:
                log.warning(
                    "paraphrasing enabled but no helper endpoint configured; "
                    "original stems will be used"
                )
                return cache
    return cache


@dataclass
class _DrawJob:
    index: int
    question: Question
    variant_digest: str
    rendered: object  # PresentedQuestion
    profile: DecodingProfile


def _record_for(
    job: _DrawJob,
    response: CompletionResponse | None,
    error: str | None,
    phrases: list[str],
    clock: float | None,
) -> AnswerRecord:
    """Extraction + judgment for one finished draw."""
    from .extraction import FAILURE

    if response is None:
        return AnswerRecord(
            question_id=job.question.id,
            draw_index=job.index,
            raw_text=error or "",
            extracted=FAILURE,
            p=0,
            variant_digest=job.variant_digest,
            profile=job.profile,
            backend="http",  # simulator draws never fail
            timestamp=0.0 if clock is None else clock,
            failed=True,
        )
    if job.question.kind == KIND_MCQ:
        extracted = extract_mcq(response.text, job.rendered, phrases=phrases)
    else:
        extracted = extract_numeric(response.text)
    p = judge(extracted, job.question, job.rendered)
    return AnswerRecord(
        question_id=job.question.id,
        draw_index=job.index,
        raw_text=response.text,
        extracted=extracted,
        p=p,
        variant_digest=job.variant_digest,
        profile=job.profile,
        backend=response.backend,
        timestamp=0.0 if clock is None else clock,
        failed=False,
    )


def _execute_plan(
    cfg: PipelineConfig,
    plan: DrawPlan,
    base_index: int,
    qs_by_id: dict[str, Question],
    backend,
    writer: RecordWriter,
    templates: dict[str, str],
    phrases: list[str],
    paraphrase_cache: ParaphraseCache | None,
) -> int:
    """Render, dispatch, extract, and append every not-yet-recorded draw of a
    plan. Returns the number of records written."""
    existing = writer.existing_keys
    deterministic = cfg.backend.kind == BACKEND_SIMULATOR
    lookup = paraphrase_cache.get if paraphrase_cache is not None else None
    jobs: dict[int, _DrawJob] = {}

    def stream() -> Iterator[tuple[int, CompletionRequest]]:
        for offset, draw in enumerate(plan.draws):
            index = base_index + offset
            if (draw.question_id, index) in existing:
                continue
            q = qs_by_id[draw.question_id]
            rendered = render_prompt(
                q, draw.variant, templates=templates, paraphrase_lookup=lookup
            )
            jobs[index] = _DrawJob(
                index=index,
                question=q,
                variant_digest=draw.variant.digest(),
                rendered=rendered,
                profile=draw.profile,
            )
            yield (
                index,
                CompletionRequest(
                    prompt_text=rendered.prompt_text,
                    profile=draw.profile,
                    max_tokens=cfg.max_tokens,
                    request_id=f"draw-{index}",
                    question=q,
                    variant=rendered,
                    seed=derive_seed(cfg.seed, index, tag="draw"),
                ),
            )

    written = 0
    for outcome in execute_requests(
        stream(),
        backend,
        concurrency=cfg.backend.concurrency,
        attempts=cfg.backend.retries,
        backoff=cfg.backend.backoff,
    ):
        job = jobs.pop(outcome.index)
        clock = None if deterministic else time.time()
        writer.append(_record_for(job, outcome.response, outcome.error, phrases, clock))
        written += 1
    return written


def compute_fuzziness(
    records: list[AnswerRecord], qs: QuestionSet
) -> dict[str, float | None]:
    """Per-question answer dispersion over usable (non-failed, extracted)
    answers; None when a question has no usable answers."""
    by_question: dict[str, list[AnswerRecord]] = {}
    for r in records:
        by_question.setdefault(r.question_id, []).append(r)
    out: dict[str, float | None] = {}
    for q in qs.questions:
        recs = by_question.get(q.id, [])
        if q.kind == KIND_MCQ:
            scores = []
            for r in recs:
                if r.failed:
                    continue
                s = option_score(r.extracted, q)
                if s is not None:
                    scores.append(s)
            out[q.id] = fuzziness_mcq(scores) if scores else None
        else:
            answers = [
                r.extracted.numeric_value
                for r in recs
                if not r.failed and r.extracted.numeric_value is not None
            ]
            out[q.id] = fuzziness_numeric(answers) if answers else None
    return out


def run_test(cfg: PipelineConfig) -> Path:
    """Testing stage: probe the backend with k*n mutated draws, then requery
    dispersed questions once. Resumes from existing records."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full, probe, _ = load_corpus_parts(cfg)
    qs_by_id = probe.by_id()
    backend = make_backend(cfg, full)
    if isinstance(backend, SimulatorBackend):
        backend.latent.export(out_dir / LATENT_FILE)
    templates = load_templates(cfg.mutation.template_dir)
    phrases = load_phrase_patterns(cfg.extraction.phrase_file)
    cache = _prepare_paraphrases(cfg, probe)
    mutation = cfg.mutation.settings()
    profiles = tuple(cfg.profiles)

    k = cfg.draws_per_question
    plan1 = plan_draws(
        probe, k, seed=derive_seed(cfg.seed, 1, tag="plan"),
        profiles=profiles, mutation=mutation,
    )
    records_path = out_dir / RECORDS_FILE
    with RecordWriter(records_path, resume=True) as writer:
        new1 = _execute_plan(
            cfg, plan1, 0, qs_by_id, backend, writer, templates, phrases, cache
        )
        log.info("phase 1: %d new draws (%d total planned)", new1, plan1.total)

        all_records, _ = load_records(records_path)
        phase1 = [r for r in all_records if r.draw_index < plan1.total]
        fuzz = compute_fuzziness(phase1, probe)
        plan2 = select_requery(
            fuzz,
            probe,
            threshold=cfg.requery_threshold,
            extra_draws=cfg.effective_requery_extra,
            seed=derive_seed(cfg.seed, 2, tag="plan"),
            profiles=profiles,
            mutation=mutation,
            index_offset=plan1.total,
        )
        new2 = _execute_plan(
            cfg, plan2, plan1.total, qs_by_id, backend, writer, templates, phrases, cache
        )
        log.info("phase 2: %d new draws (%d planned requeries)", new2, plan2.total)

    final_records, _ = load_records(records_path)
    failed = sum(1 for r in final_records if r.failed)
    manifest = {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "backend": _backend_identity(cfg),
        "corpus_digest": corpus_digest(cfg.corpus.path),
        "counts": {
            "questions": probe.n,
            "phase1_draws": plan1.total,
            "requery_draws": plan2.total,
            "records": len(final_records),
            "failed": failed,
        },
        "fuzziness": {qid: fuzz.get(qid) for qid in sorted(qs_by_id)},
    }
    (out_dir / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return records_path


def _backend_identity(cfg: PipelineConfig) -> dict:
    if cfg.backend.kind == BACKEND_SIMULATOR:
        return {"kind": "simulator", "mode": cfg.backend.simulator.mode}
    return {
        "kind": "http",
        "base_url": cfg.backend.http.base_url,
        "model": cfg.backend.http.model,
    }


def run_build(cfg: PipelineConfig, baseline_random: bool = False) -> Path:
    """Learning-stage input: one confidence-annotated instruction row per
    probed question (all-wrong histories loss-masked)."""
    out_dir = Path(cfg.out_dir)
    records_path = out_dir / RECORDS_FILE
    if not records_path.exists():
        raise PipelineError(f"{records_path} not found; run `test` first")
    records, _ = load_records(records_path)
    if not records:
        raise PipelineError(f"{records_path} holds no records")
    _, probe, _ = load_corpus_parts(cfg)
    histories = group_histories(records)
    templates = load_templates(cfg.mutation.template_dir)
    helper = _helper_client(cfg)
    pool = rephrase_prompt_pool(
        helper,
        pool_size=cfg.labeling.prompt_pool_size,
        cache_path=cfg.labeling.prompt_pool_cache,
    )
    rows = emit_dataset(
        histories,
        probe.by_id(),
        pool=pool,
        seed=cfg.seed,
        baseline_random=baseline_random,
        per_draw=cfg.labeling.per_draw,
        templates=templates,
    )
    path = out_dir / INSTRUCTION_FILE
    write_instruction_file(rows, path)
    cases: dict[str, int] = {}
    for row in rows:
        cases[row.case] = cases.get(row.case, 0) + 1
    build_manifest = {
        "config_digest": cfg.digest(),
        "rows": len(rows),
        "cases": dict(sorted(cases.items())),
        "baseline_random": baseline_random,
        "prompt_pool_size": len(pool),
    }
    (out_dir / BUILD_MANIFEST_FILE).write_text(
        json.dumps(build_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def run_simulate(cfg: PipelineConfig) -> Path:
    """Produce predicting-stage responses from the simulator, one line per
    (held-out question, repeat): {"question_id", "text",
    "first_token_probability"}."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full, _, evalp = load_corpus_parts(cfg)
    latent = _latent_for(cfg, full)
    latent.export(out_dir / LATENT_FILE)
    templates = load_templates(cfg.mutation.template_dir)
    from .simulator import simulate_answer

    path = out_dir / RESPONSES_FILE
    with path.open("w", encoding="utf-8") as fh:
        line_index = 0
        for q in evalp.questions:
            rendered = render_prompt(
                q,
                identity_spec(q, template_id=TEMPLATE_CONFIDENCE),
                templates=templates,
                instruction=SEED_INSTRUCTION,
            )
            for _ in range(cfg.simulate_repeats):
                response = simulate_answer(
                    q, rendered, latent, seed=derive_seed(cfg.seed, line_index, tag="simulate")
                )
                fh.write(
                    json.dumps(
                        {
                            "question_id": q.id,
                            "text": response.text,
                            "first_token_probability": response.first_token_probability,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
                line_index += 1
    return path


def run_eval(cfg: PipelineConfig, responses_path: str | Path | None = None) -> Path:
    """Predicting-stage evaluation of an answer+confidence stream."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    responses_path = Path(responses_path or out_dir / RESPONSES_FILE)
    if not responses_path.exists():
        raise PipelineError(f"{responses_path} not found")
    _, _, evalp = load_corpus_parts(cfg)
    by_id = evalp.by_id()
    templates = load_templates(cfg.mutation.template_dir)
    phrases = load_phrase_patterns(cfg.extraction.phrase_file)

    renderings = {
        q.id: render_prompt(
            q,
            identity_spec(q, template_id=TEMPLATE_CONFIDENCE),
            templates=templates,
            instruction=SEED_INSTRUCTION,
        )
        for q in evalp.questions
    }

    points: list[calib.EvalPoint] = []
    fp_rows: list[dict] = []
    unparsed = 0
    with responses_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            qid = obj["question_id"]
            q = by_id.get(qid)
            if q is None:
                raise PipelineError(
                    f"{responses_path}:{lineno}: unknown question id {qid!r}"
                )
            text = obj["text"]
            rendered = renderings[qid]
            if q.kind == KIND_MCQ:
                extracted = extract_mcq(text, rendered, phrases=phrases)
            else:
                extracted = extract_numeric(text)
            correct = judge(extracted, q, rendered)
            fp_rows.append(
                {
                    "question_id": qid,
                    "first_token_probability": obj.get("first_token_probability"),
                    "correct": correct,
                }
            )
            conf = calib.parse_confidence(text)
            if conf is None:
                unparsed += 1
                continue
            points.append(
                calib.EvalPoint(question_id=qid, confidence=conf, correct=correct)
            )

    report = calib.build_report(
        points,
        bins=cfg.calibration.bins,
        grid=tuple(cfg.calibration.threshold_grid),
        min_dp=cfg.calibration.min_dp,
        unparsed=unparsed,
        first_prob=calib.first_prob_points(fp_rows),
    )
    report_path = out_dir / REPORT_FILE
    calib.write_report(report, report_path, out_dir / BINS_FILE)
    log.info(
        "eval: %d points (%d unparsed), ECE %.4f, r %s",
        report.n_points, unparsed, report.ece_value,
        "undefined" if report.pearson_r is None else f"{report.pearson_r:.4f}",
    )
    return report_path
