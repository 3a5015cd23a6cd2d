"""Calibration evaluation over (confidence, correctness) points.

Points are binned into B equal-width confidence bins over [0,1] (the last
bin right-closed). The expected calibration error is the bin-count-weighted
mean absolute gap between per-bin accuracy and per-bin mean confidence, and
the correlation statistic is a textbook Pearson coefficient over the
nonempty bins' (accuracy, confidence) pairs. A confidence series with no
variance across bins (a model that says "90%" to everything) makes the
correlation undefined; that degeneracy is reported as such, never coerced
to zero, because it is itself a finding about the model.

Threshold semantics are strict: a point is accepted at threshold t only if
its confidence exceeds t, and the data proportion DP is the accepted
fraction of all points.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

SOURCE_VERBALIZED = "verbalized"
SOURCE_FIRST_TOKEN = "first_token_prob"

DEFAULT_BINS = 10
DEFAULT_THRESHOLD_GRID = tuple(i / 20 for i in range(20))  # 0.00, 0.05, ..., 0.95
DEFAULT_MIN_DP = 0.1

_CONFIDENCE_RE = re.compile(
    r"my\s+confidence\s+is\s*[:：]?\s*([0-9]+(?:\.[0-9]+)?)\s*%", re.IGNORECASE
)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class EvalPoint:
    question_id: str
    confidence: float
    correct: int
    source: str = SOURCE_VERBALIZED

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise CalibrationError(f"confidence {self.confidence} outside [0,1]")
        if self.correct not in (0, 1):
            raise CalibrationError("correct must be 0 or 1")


@dataclass(frozen=True, slots=True)
class Bin:
    index: int
    lo: float
    hi: float
    count: int
    acc: float | None  # None when the bin is empty
    conf: float | None


def parse_confidence(text: str) -> float | None:
    """Confidence stated in the text ("My confidence is 61.5%."), or None.

    The last statement wins; values outside 0..100% are treated as unparsed.
    """
    matches = _CONFIDENCE_RE.findall(text or "")
    if not matches:
        return None
    value = float(matches[-1])
    if value > 100.0:
        return None
    return value / 100.0


def bin_points(points: list[EvalPoint], bins: int = DEFAULT_BINS) -> list[Bin]:
    """Partition points into equal-width confidence bins; last bin right-closed."""
    if bins < 2:
        raise CalibrationError("need at least 2 bins")
    if not points:
        raise CalibrationError("no points to bin")
    edges = [i / bins for i in range(bins + 1)]
    counts = [0] * bins
    acc_sum = [0.0] * bins
    conf_sum = [0.0] * bins
    for p in points:
        idx = min(bisect_right(edges, p.confidence) - 1, bins - 1)
        counts[idx] += 1
        acc_sum[idx] += p.correct
        conf_sum[idx] += p.confidence
    out = []
    for b in range(bins):
        n = counts[b]
        out.append(
            Bin(
                index=b,
                lo=edges[b],
                hi=edges[b + 1],
                count=n,
                acc=acc_sum[b] / n if n else None,
                conf=conf_sum[b] / n if n else None,
            )
        )
    return out


def ece(bins: list[Bin]) -> float:
    """Bin-count-weighted mean |accuracy - confidence|; empty bins contribute 0."""
    total = sum(b.count for b in bins)
    if total == 0:
        raise CalibrationError("no points behind these bins")
    return sum(
        (b.count / total) * abs(b.acc - b.conf) for b in bins if b.count > 0
    )


def pearson(bins: list[Bin]) -> float | None:
    """Pearson r over nonempty bins' (accuracy, confidence) pairs.

    Returns None (undefined) when fewer than two bins are nonempty or either
    series has zero variance.
    """
    pairs = [(b.acc, b.conf) for b in bins if b.count > 0]
    if len(pairs) < 2:
        return None
    accs = [a for a, _ in pairs]
    confs = [c for _, c in pairs]
    mean_a = sum(accs) / len(accs)
    mean_c = sum(confs) / len(confs)
    cov = sum((a - mean_a) * (c - mean_c) for a, c in pairs)
    var_a = sum((a - mean_a) ** 2 for a in accs)
    var_c = sum((c - mean_c) ** 2 for c in confs)
    if var_a == 0.0 or var_c == 0.0:
        return None
    return cov / math.sqrt(var_a * var_c)


def accuracy(points: list[EvalPoint]) -> float:
    if not points:
        raise CalibrationError("no points")
    return sum(p.correct for p in points) / len(points)


def acc_at_threshold(points: list[EvalPoint], t: float) -> tuple[float | None, float]:
    """(accuracy over points with confidence strictly above t, accepted fraction).

    The accuracy is None when no point qualifies.
    """
    if not points:
        raise CalibrationError("no points")
    if not 0.0 <= t <= 1.0:
        raise CalibrationError(f"threshold {t} outside [0,1]")
    accepted = [p for p in points if p.confidence > t]
    dp = len(accepted) / len(points)
    if not accepted:
        return None, dp
    return sum(p.correct for p in accepted) / len(accepted), dp


def find_threshold(
    points: list[EvalPoint],
    grid: tuple[float, ...] = DEFAULT_THRESHOLD_GRID,
    min_dp: float = DEFAULT_MIN_DP,
) -> float:
    """Grid threshold maximizing accepted-set accuracy subject to DP >= min_dp.

    Ties break toward the smaller threshold (more answers accepted). Raises
    when no grid point keeps enough data.
    """
    if not 0.0 < min_dp <= 1.0:
        raise CalibrationError(f"min_dp {min_dp} outside (0,1]")
    best: tuple[float, float] | None = None  # (acc_t, -t) maximized
    for t in sorted(grid):
        acc_t, dp = acc_at_threshold(points, t)
        if acc_t is None or dp < min_dp:
            continue
        if best is None or acc_t > best[0]:
            best = (acc_t, t)
    if best is None:
        raise CalibrationError(f"no grid threshold keeps DP >= {min_dp}")
    return best[1]


def first_prob_points(rows: list[dict]) -> tuple[list[EvalPoint], int]:
    """Points whose confidence is the first generated token's probability.

    ``rows`` carry {"question_id", "first_token_probability", "correct"};
    rows without a probability are excluded and tallied.
    """
    points = []
    missing = 0
    for row in rows:
        prob = row.get("first_token_probability")
        if prob is None:
            missing += 1
            continue
        points.append(
            EvalPoint(
                question_id=row["question_id"],
                confidence=float(prob),
                correct=int(row["correct"]),
                source=SOURCE_FIRST_TOKEN,
            )
        )
    return points, missing


@dataclass(slots=True)
class CalibrationReport:
    n_points: int
    unparsed: int
    bins: list[Bin]
    ece_value: float
    pearson_r: float | None
    acc: float
    thresholds: list[dict]
    chosen_threshold: float | None
    config: dict
    first_prob: dict | None = None

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "unparsed": self.unparsed,
            "ece": self.ece_value,
            "ece_pct": self.ece_value * 100.0,
            "pearson_r": "undefined" if self.pearson_r is None else self.pearson_r,
            "acc": self.acc,
            "thresholds": self.thresholds,
            "chosen_threshold": self.chosen_threshold,
            "bins": [
                {
                    "index": b.index,
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "acc": b.acc,
                    "conf": b.conf,
                }
                for b in self.bins
            ],
            "first_prob": self.first_prob,
            "config": self.config,
        }


def build_report(
    points: list[EvalPoint],
    bins: int = DEFAULT_BINS,
    grid: tuple[float, ...] = DEFAULT_THRESHOLD_GRID,
    min_dp: float = DEFAULT_MIN_DP,
    unparsed: int = 0,
    first_prob: tuple[list[EvalPoint], int] | None = None,
) -> CalibrationReport:
    """Full calibration report over parsed points.

    ``first_prob`` optionally carries the first-token-probability baseline
    points and the count of rows lacking probabilities.
    """
    if not points:
        raise CalibrationError(f"no parseable points (unparsed lines: {unparsed})")
    binned = bin_points(points, bins)
    table = []
    for t in sorted(grid):
        acc_t, dp = acc_at_threshold(points, t)
        table.append({"t": t, "acc_t": acc_t, "dp": dp})
    try:
        chosen = find_threshold(points, grid=tuple(grid), min_dp=min_dp)
    except CalibrationError as exc:
        log.warning("threshold search failed: %s", exc)
        chosen = None
    baseline = None
    if first_prob is not None:
        fp_points, missing = first_prob
        if fp_points:
            fp_bins = bin_points(fp_points, bins)
            baseline = {
                "n_points": len(fp_points),
                "missing_probability": missing,
                "ece": ece(fp_bins),
                "ece_pct": ece(fp_bins) * 100.0,
                "pearson_r": (
                    "undefined" if pearson(fp_bins) is None else pearson(fp_bins)
                ),
                "acc": accuracy(fp_points),
            }
        else:
            baseline = {"available": False, "missing_probability": missing}
    return CalibrationReport(
        n_points=len(points),
        unparsed=unparsed,
        bins=binned,
        ece_value=ece(binned),
        pearson_r=pearson(binned),
        acc=accuracy(points),
        thresholds=table,
        chosen_threshold=chosen,
        config={"bins": bins, "threshold_grid": sorted(grid), "min_dp": min_dp},
        first_prob=baseline,
    )


def write_report(report: CalibrationReport, report_path: str | Path, csv_path: str | Path) -> None:
    """Emit report.json and the bin table CSV used for reliability diagrams."""
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    csv_path = Path(csv_path)
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lo", "hi", "count", "acc", "conf"])
        for b in report.bins:
            writer.writerow(
                [
                    b.lo,
                    b.hi,
                    b.count,
                    "" if b.acc is None else b.acc,
                    "" if b.conf is None else b.conf,
                ]
            )


def plot_reliability(report: CalibrationReport, path: str | Path) -> None:
    """Render a reliability diagram (requires matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", label="perfect")
    xs = [b.conf for b in report.bins if b.count > 0]
    ys = [b.acc for b in report.bins if b.count > 0]
    widths = 1.0 / len(report.bins)
    ax.bar(
        [b.lo + widths / 2 for b in report.bins if b.count > 0],
        ys,
        width=widths * 0.9,
        alpha=0.5,
        label="accuracy",
    )
    ax.scatter(xs, ys, color="black", zorder=3)
    ax.set_xlabel("stated confidence")
    ax.set_ylabel("empirical correctness")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
