"""Command-line entry point: ``confprobe {test,build,eval,simulate}``.

All stages read one JSON config (see README for the schema); the flags below
override the matching config fields for quick experiments. The HTTP backend
reads its API key from the LEPE_API_KEY environment variable.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .calibration import CalibrationError
from .client import BackendError
from .config import ConfigError, load_config
from .corpus import CorpusError
from .pipeline import PipelineError, run_build, run_eval, run_simulate, run_test
from .records import StoreError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument(
        "--backend", choices=["simulator", "http"], default=None,
        help="override the backend kind",
    )
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confprobe",
        description=(
            "Probe a model's inherent confidence by repeated mutated questioning, "
            "build confidence-annotated instruction data, and evaluate calibration."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="run the answer-probing stage")
    _add_common(p_test)

    p_build = sub.add_parser("build", help="build instruction data from records")
    _add_common(p_build)
    p_build.add_argument(
        "--baseline", choices=["random"], default=None,
        help="emit the random-confidence ablation dataset instead",
    )

    p_eval = sub.add_parser("eval", help="evaluate calibration of a response stream")
    _add_common(p_eval)
    p_eval.add_argument(
        "--responses", default=None,
        help="responses JSONL (default: <out_dir>/responses.jsonl)",
    )
    p_eval.add_argument("--bins", type=int, default=None, help="override bin count")
    p_eval.add_argument(
        "--threshold-grid", default=None,
        help="comma-separated thresholds, e.g. 0.5,0.55,0.6",
    )
    p_eval.add_argument("--min-dp", type=float, default=None,
                        help="minimum accepted-data proportion for threshold search")
    p_eval.add_argument("--plot", default=None,
                        help="also render a reliability diagram PNG to this path")

    p_sim = sub.add_parser("simulate", help="write synthetic predicting-stage responses")
    _add_common(p_sim)
    p_sim.add_argument("--repeats", type=int, default=None,
                       help="responses per question (override)")

    return parser


def _configure(args: argparse.Namespace):
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.backend is not None:
        cfg.backend.kind = args.backend
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "bins", None) is not None:
        cfg.calibration.bins = args.bins
    if getattr(args, "threshold_grid", None):
        cfg.calibration.threshold_grid = [
            float(t) for t in args.threshold_grid.split(",") if t.strip()
        ]
    if getattr(args, "min_dp", None) is not None:
        cfg.calibration.min_dp = args.min_dp
    if getattr(args, "repeats", None) is not None:
        cfg.simulate_repeats = args.repeats
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _configure(args)
        if args.command == "test":
            path = run_test(cfg)
        elif args.command == "build":
            path = run_build(cfg, baseline_random=args.baseline == "random")
        elif args.command == "eval":
            path = run_eval(cfg, responses_path=args.responses)
            if args.plot:
                _render_plot_from_report(path, args.plot)
        elif args.command == "simulate":
            path = run_simulate(cfg)
        else:  # pragma: no cover - argparse enforces choices
            raise AssertionError(args.command)
    except (ConfigError, CorpusError, PipelineError, StoreError,
            CalibrationError, BackendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


def _render_plot_from_report(report_path: Path, plot_path: str) -> None:
    import json

    from .calibration import Bin, CalibrationReport, plot_reliability

    obj = json.loads(Path(report_path).read_text(encoding="utf-8"))
    bins = [
        Bin(index=b["index"], lo=b["lo"], hi=b["hi"], count=b["count"],
            acc=b["acc"], conf=b["conf"])
        for b in obj["bins"]
    ]
    report = CalibrationReport(
        n_points=obj["n_points"],
        unparsed=obj["unparsed"],
        bins=bins,
        ece_value=obj["ece"],
        pearson_r=None if obj["pearson_r"] == "undefined" else obj["pearson_r"],
        acc=obj["acc"],
        thresholds=obj["thresholds"],
        chosen_threshold=obj["chosen_threshold"],
        config=obj["config"],
    )
    plot_reliability(report, plot_path)


if __name__ == "__main__":
    sys.exit(main())
