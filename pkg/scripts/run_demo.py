#!/usr/bin/env python3
"""End-to-end offline demo against the synthetic simulator.

Probes a synthetic model whose per-question correctness probabilities are
known, builds the confidence-annotated instruction data, produces
predicting-stage responses from a calibrated responder, and prints the
calibration report. Everything lands under --out (default runs/demo).
"""

import argparse
import json
from pathlib import Path

from confprobe.config import PipelineConfig
from confprobe.corpus import save_questions
from confprobe.pipeline import run_build, run_eval, run_simulate, run_test
from confprobe.simulator import make_synthetic_questions


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--questions", type=int, default=200)
    parser.add_argument("--draws", type=int, default=10)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = out / "corpus.jsonl"
    save_questions(make_synthetic_questions(args.questions, seed=args.seed), corpus_path)

    cfg = PipelineConfig.from_dict(
        {
            "corpus": {"path": str(corpus_path)},
            "out_dir": str(out),
            "seed": args.seed,
            "draws_per_question": args.draws,
            "backend": {
                "kind": "simulator",
                "simulator": {
                    "latent": {"distribution": "uniform", "low": 0.0, "high": 1.0},
                    "mode": "calibrated_responder",
                },
                "concurrency": 8,
            },
        }
    )
    config_path = out / "config.json"
    config_path.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")

    print(f"[1/4] probing: {args.questions} questions x {args.draws} draws")
    run_test(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    print(f"      {manifest['counts']['records']} records "
          f"({manifest['counts']['requery_draws']} requeries)")

    print("[2/4] building instruction data")
    run_build(cfg)
    build = json.loads((out / "build_manifest.json").read_text())
    print(f"      {build['rows']} rows, cases {build['cases']}")

    print("[3/4] simulating predicting-stage responses")
    run_simulate(cfg)

    print("[4/4] evaluating calibration")
    run_eval(cfg)
    report = json.loads((out / "report.json").read_text())
    print(
        f"\nECE {report['ece']:.4f} ({report['ece_pct']:.2f} on the x100 scale), "
        f"Pearson r {report['pearson_r']}, ACC {report['acc']:.3f}, "
        f"chosen threshold {report['chosen_threshold']}"
    )
    print(f"outputs in {out}/ (config echoed to {config_path})")


if __name__ == "__main__":
    main()
