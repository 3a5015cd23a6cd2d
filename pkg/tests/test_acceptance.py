"""Acceptance suite: one test per release criterion, each printing a PASS
line (run with ``pytest tests/test_acceptance.py -v -s``). Tolerances are
fixed here, not tuned elsewhere; every expected value is either exact by
construction or produced by the independent oracle named in the test.
"""

import itertools
import json
import random
import time
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from confprobe.calibration import (
    Bin,
    EvalPoint,
    acc_at_threshold,
    bin_points,
    ece,
    pearson,
)
from confprobe.client import derive_seed
from confprobe.config import PipelineConfig
from confprobe.corpus import QuestionSet, save_questions
from confprobe.extraction import extract_mcq, judge
from confprobe.labeling import compute_confidence, emit_instruction, random_confidence
from confprobe.mutation import LABEL_STYLES, VariantSpec, identity_spec, render_prompt
from confprobe.pipeline import load_corpus_parts, run_build, run_eval, run_simulate, run_test
from confprobe.records import AnswerRecord, QuestionHistory, group_histories, load_records
from confprobe.sampling import fuzziness_mcq, fuzziness_numeric, plan_draws, select_requery
from confprobe.simulator import make_latent, make_synthetic_questions, simulate_answer

from conftest import make_mcq

DATA = Path(__file__).parent / "data"


def simulator_config(tmp_path, n, k, mode="plain", latent=None, seed=7, **extra):
    corpus_path = tmp_path / "corpus.jsonl"
    if not corpus_path.exists():
        save_questions(make_synthetic_questions(n, seed=2), corpus_path)
    obj = {
        "corpus": {"path": str(corpus_path)},
        "out_dir": str(tmp_path / "run"),
        "seed": seed,
        "draws_per_question": k,
        "backend": {
            "kind": "simulator",
            "simulator": {
                "latent": latent or {"distribution": "uniform", "low": 0.0, "high": 1.0},
                "mode": mode,
            },
            "concurrency": 4,
        },
    }
    obj.update(extra)
    return PipelineConfig.from_dict(obj)


def test_eq3_confidence_convergence(tmp_path):
    # Oracle: binomial concentration. With ~1000 draws per question the
    # empirical correct-rate must sit within 0.05 of theta for >= 95% of
    # 200 questions, and the whole testing stage must finish inside 2 min.
    started = time.monotonic()
    cfg = simulator_config(
        tmp_path, n=200, k=1000,
        requery_threshold=100.0,  # dispersion never exceeds this; no phase 2
        backend={"kind": "simulator",
                 "simulator": {"latent": {"distribution": "uniform"}, "mode": "plain"},
                 "concurrency": 1},
    )
    run_test(cfg)
    elapsed = time.monotonic() - started
    records, _ = load_records(tmp_path / "run" / "records.jsonl")
    latent = make_latent(
        load_corpus_parts(cfg)[0], cfg.backend.simulator.latent,
        seed=derive_seed(cfg.seed, 0, tag="latent"),
    )
    histories = group_histories(records)
    assert len(histories) == 200
    within = 0
    within_3sigma = 0
    for h in histories:
        import math

        theta = latent.theta[h.question_id]
        gap = abs(compute_confidence(h) - theta)
        within += gap <= 0.05
        within_3sigma += gap <= 3 * math.sqrt(theta * (1 - theta) / h.k_effective)
    assert within / len(histories) >= 0.95
    assert within_3sigma / len(histories) >= 0.99  # binomial concentration
    assert elapsed < 120.0
    print(
        f"\nACCEPTANCE PASS: empirical confidence within 0.05 of theta for "
        f"{within}/200 questions (3-sigma bound: {within_3sigma}/200) at "
        f"k=1000 in {elapsed:.0f}s"
    )


def test_eq4_calibrated_and_anticalibrated_ece(tmp_path):
    # Oracle: analytic expectation. A responder stating its own theta is
    # calibrated (ECE -> 0); stating 1-theta gives E|2theta-1| = 0.5.
    cfg = simulator_config(tmp_path, n=10_000, k=1, mode="calibrated_responder")
    run_simulate(cfg)
    run_eval(cfg)
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["n_points"] == 10_000
    assert report["config"]["bins"] == 10
    assert report["ece"] <= 0.02

    cfg_anti = simulator_config(
        tmp_path, n=10_000, k=1, mode="anticalibrated_responder",
        out_dir=str(tmp_path / "run_anti"),
    )
    run_simulate(cfg_anti)
    run_eval(cfg_anti)
    report_anti = json.loads((tmp_path / "run_anti" / "report.json").read_text())
    assert report_anti["ece"] >= 0.4
    print(
        f"\nACCEPTANCE PASS: ECE {report['ece']:.4f} <= 0.02 calibrated, "
        f"{report_anti['ece']:.4f} >= 0.4 anti-calibrated (10,000 points, B=10)"
    )


def _points(pairs):
    return [
        EvalPoint(question_id=f"q{i}", confidence=c, correct=y)
        for i, (c, y) in enumerate(pairs)
    ]


def test_eq5_ece_exactness():
    two_bin = _points([(0.3, 0)] * 4 + [(0.3, 1)] + [(0.7, 0)] * 3 + [(0.7, 1)] * 2)
    bins = bin_points(two_bin, bins=2)
    assert [b.count for b in bins] == [5, 5]
    value = ece(bins)
    assert abs(value - 0.200000) < 1e-9

    single = _points([(0.9, 0)] * 3 + [(0.9, 1)] * 2)
    single_bins = bin_points(single, bins=10)
    assert abs(ece(single_bins) - 0.5) < 1e-9
    print(
        f"\nACCEPTANCE PASS: ECE exact on fixtures ({value:.6f} and "
        f"{ece(single_bins):.6f})"
    )


def test_eq6_pearson():
    identity = [
        Bin(index=i, lo=0, hi=0, count=4, acc=v, conf=v)
        for i, v in enumerate((0.15, 0.45, 0.75, 0.95))
    ]
    assert pearson(identity) == pytest.approx(1.0, abs=1e-9)

    pairs = [(0.1, 0.2), (0.5, 0.4), (0.9, 0.9)]
    # Independent oracle: textbook Pearson computed from scratch.
    import math

    xs = [a for a, _ in pairs]
    ys = [c for _, c in pairs]
    mx, my = sum(xs) / 3, sum(ys) / 3
    oracle = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / math.sqrt(
        sum((x - mx) ** 2 for x in xs) * sum((y - my) ** 2 for y in ys)
    )
    bins = [Bin(index=i, lo=0, hi=0, count=5, acc=a, conf=c) for i, (a, c) in enumerate(pairs)]
    value = pearson(bins)
    assert value == pytest.approx(oracle, abs=1e-6)

    degenerate = [
        Bin(index=i, lo=0, hi=0, count=5, acc=0.5, conf=c) for i, c in enumerate((0.2, 0.9))
    ]
    assert pearson(degenerate) is None  # undefined, never coerced to 0
    print(
        f"\nACCEPTANCE PASS: Pearson identity=1, fixture={value:.6f} matches "
        f"oracle {oracle:.6f}, degenerate variance reported undefined"
    )


def test_eq1_eq2_fuzziness_oracles():
    assert fuzziness_mcq([1, 5]) == 2.0
    assert fuzziness_mcq([4, 4, 4, 4]) == 0.0
    rng = random.Random(99)
    for _ in range(1000):
        k = rng.randint(1, 50)
        answers = [str(rng.randint(0, 12)) for _ in range(k)]
        assert fuzziness_numeric(answers) == len(set(answers)) / k

    @settings(max_examples=1000, derandomize=True)
    @given(
        scores=st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=25),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    def permutation_invariant(scores, seed):
        shuffled = scores[:]
        random.Random(seed).shuffle(shuffled)
        assert fuzziness_mcq(shuffled) == pytest.approx(fuzziness_mcq(scores))

    permutation_invariant()
    print(
        "\nACCEPTANCE PASS: mcq fuzziness matches hand MAD and is permutation-"
        "invariant (1000 cases); numeric fuzziness equals brute-force "
        "distinct/k on 1000 random lists"
    )


def test_mutation_invariance_exhaustive():
    q = make_mcq(qid="exh", m=5, gold=4)
    checked = 0
    for perm in itertools.permutations(range(5)):
        for style in LABEL_STYLES:
            for distractors in ((), ("none_of_the_above", "all_of_the_above")):
                spec = VariantSpec(label_style=style, permutation=perm,
                                   distractors=distractors)
                v = render_prompt(q, spec)
                for label, _ in v.presented_options:
                    text = f"The correct answer is {label}."
                    verdict = judge(extract_mcq(text, v), q, v)
                    expected = 1 if v.answer_key[label] == q.gold else 0
                    assert verdict == expected, (perm, style, distractors, label)
                    checked += 1
    assert checked == 120 * 5 * (5 + 7)
    print(
        f"\nACCEPTANCE PASS: judgment invariant over 120 permutations x 5 label "
        f"styles x distractors on/off ({checked} label choices)"
    )


def test_sampling_counts_on_random_configs():
    rng = random.Random(42)
    for trial in range(100):
        n = rng.randint(1, 25)
        k = rng.randint(1, 10)
        qs = QuestionSet(questions=tuple(make_mcq(qid=f"t{trial}q{i}") for i in range(n)))
        plan = plan_draws(qs, k=k, seed=rng.randrange(2**31))
        assert plan.total == k * n
        threshold = rng.uniform(0.0, 1.0)
        extra = rng.randint(1, 8)
        fuzz = {q.id: (None if rng.random() < 0.1 else rng.uniform(0.0, 1.5))
                for q in qs.questions}
        expected = sum(1 for f in fuzz.values() if f is not None and f > threshold)
        requery = select_requery(fuzz, qs, threshold=threshold, extra_draws=extra,
                                 seed=rng.randrange(2**31))
        assert requery.total == extra * expected
    print(
        "\nACCEPTANCE PASS: plan emits exactly k*n draws and requery exactly "
        "extra*|{F > threshold}| on 100 random configs"
    )


def _golden_history(pattern):
    from confprobe.extraction import ExtractedAnswer
    from confprobe.sampling import DEFAULT_PROFILES

    def rec(idx, p, label, canonical, text):
        return AnswerRecord(
            question_id="planet-1", draw_index=idx, raw_text=text,
            extracted=ExtractedAnswer(kind="mcq_label", presented_label=label,
                                      canonical_index=canonical,
                                      matched_by="answer_phrase"),
            p=p, variant_digest="fixture", profile=DEFAULT_PROFILES[0],
            backend="simulator", timestamp=0.0,
        )

    records = []
    for i, p in enumerate(pattern):
        if p:
            records.append(rec(i, 1, "B", 2, "The correct answer is B. Mars."))
        elif i % 2:
            records.append(rec(i, 0, "C", 3, "The correct answer is C. Jupiter."))
        else:
            records.append(rec(i, 0, "A", 1, "The correct answer is A. Venus."))
    return QuestionHistory(question_id="planet-1", records=records)


def test_instruction_golden_files():
    from confprobe.corpus import Option, Question

    planet = Question(
        id="planet-1", kind="mcq",
        stem="Which planet is known as the Red Planet?",
        options=(Option(1, "Venus"), Option(2, "Mars"), Option(3, "Jupiter"),
                 Option(4, "Saturn")),
        gold=2,
    )
    rows = [
        emit_instruction(_golden_history([1] * 5), planet, rng=random.Random(1)),
        emit_instruction(_golden_history([1] * 8 + [0] * 5), planet, rng=random.Random(1)),
        emit_instruction(_golden_history([0] * 7), planet, rng=random.Random(1)),
    ]
    emitted = "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in rows)
    golden = (DATA / "instruction_goldens.jsonl").read_text(encoding="utf-8")
    assert emitted == golden  # byte-exact
    assert "My confidence is 61.5%." in rows[1].response
    assert rows[2].loss_masked and rows[2].confidence == 0.0
    print(
        "\nACCEPTANCE PASS: all-correct / 8-of-13 / all-wrong rows reproduce "
        "the golden bytes (61.5% partial, masked all-wrong)"
    )


def test_threshold_semantics():
    fixture = _points([(0.9, 1), (0.9, 1), (0.3, 0), (0.3, 0)])
    acc_t, dp = acc_at_threshold(fixture, 0.55)
    assert acc_t == pytest.approx(1.0)
    assert dp == pytest.approx(0.5)
    edge_acc, edge_dp = acc_at_threshold(_points([(0.9, 1)] * 6), 0.9)
    assert edge_dp == 0.0 and edge_acc is None
    print(
        "\nACCEPTANCE PASS: threshold 0.55 gives (ACC_t=1.0, DP=0.5); strict "
        "inequality empties the t=0.9 edge case"
    )


def test_end_to_end_determinism(tmp_path):
    outputs = (
        "records.jsonl", "manifest.json", "instruction.jsonl", "build_manifest.json",
        "responses.jsonl", "report.json", "bins.csv", "latent.json",
    )
    corpus_path = tmp_path / "corpus.jsonl"
    save_questions(make_synthetic_questions(25, seed=6), corpus_path)
    out_dir = tmp_path / "run"

    def run_all():
        cfg = PipelineConfig.from_dict({
            "corpus": {"path": str(corpus_path)},
            "out_dir": str(out_dir),
            "seed": 21,
            "draws_per_question": 6,
            "backend": {
                "kind": "simulator",
                "simulator": {"latent": {"distribution": "uniform"},
                              "mode": "calibrated_responder"},
                "concurrency": 8,
            },
        })
        run_test(cfg)
        run_build(cfg)
        run_simulate(cfg)
        run_eval(cfg)
        return {name: (out_dir / name).read_bytes() for name in outputs}

    import shutil

    first = run_all()
    shutil.rmtree(out_dir)
    second = run_all()
    assert first == second
    print(
        "\nACCEPTANCE PASS: test+build+simulate+eval byte-identical across two "
        "runs at concurrency 8 (8 output files compared)"
    )


def test_random_confidence_baseline_direction():
    # Mirrors the near-zero correlation of training on random confidences:
    # random stated confidence vs fresh simulator correctness. Loss-masked
    # all-wrong rows carry no trainable confidence signal and are excluded.
    rs = []
    for seed in range(20):
        qs = make_synthetic_questions(300, seed=1000 + seed)
        latent = make_latent(qs, {"distribution": "uniform"}, seed=2000 + seed)
        points = []
        for i, q in enumerate(qs.questions):
            rendered = render_prompt(q, identity_spec(q))
            probe = simulate_answer(q, rendered, latent, seed=derive_seed(seed, i, "probe"))
            p = judge(extract_mcq(probe.text, rendered), q, rendered)
            history = _one_draw_history(q.id, p, probe.text)
            row = random_confidence(history, q, seed=derive_seed(seed, i, "row"))
            if row.loss_masked:
                continue
            check = simulate_answer(q, rendered, latent, seed=derive_seed(seed, i, "check"))
            correct = judge(extract_mcq(check.text, rendered), q, rendered)
            points.append(
                EvalPoint(question_id=q.id, confidence=row.confidence, correct=correct)
            )
        r = pearson(bin_points(points, bins=10))
        assert r is not None
        rs.append(r)
    mean_r = sum(rs) / len(rs)
    assert abs(mean_r) <= 0.15
    print(
        f"\nACCEPTANCE PASS: random-confidence baseline mean r = {mean_r:+.3f} "
        f"over 20 seeds (|r| <= 0.15; range {min(rs):+.3f}..{max(rs):+.3f})"
    )


def _one_draw_history(qid, p, text):
    from confprobe.extraction import ExtractedAnswer
    from confprobe.sampling import DEFAULT_PROFILES

    return QuestionHistory(
        question_id=qid,
        records=[
            AnswerRecord(
                question_id=qid, draw_index=0, raw_text=text,
                extracted=ExtractedAnswer(kind="mcq_label", presented_label="A",
                                          canonical_index=1, matched_by="answer_phrase"),
                p=p, variant_digest="d", profile=DEFAULT_PROFILES[0],
                backend="simulator", timestamp=0.0,
            )
        ],
    )
