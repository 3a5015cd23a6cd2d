#!/usr/bin/env python3
"""Emit a synthetic question corpus in the canonical JSONL format."""

import argparse

from confprobe.corpus import save_questions
from confprobe.simulator import make_synthetic_questions


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="output corpus path (JSONL)")
    parser.add_argument("-n", type=int, default=100, help="number of questions")
    parser.add_argument("--options", type=int, default=4, help="options per MCQ")
    parser.add_argument("--numeric-every", type=int, default=0,
                        help="make every Nth question numeric (0 = none)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    qs = make_synthetic_questions(
        args.n, options_per_question=args.options, seed=args.seed,
        numeric_every=args.numeric_every,
    )
    save_questions(qs, args.out)
    print(f"wrote {qs.n} questions to {args.out}")


if __name__ == "__main__":
    main()
