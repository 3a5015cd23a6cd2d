"""Load and validate instruction rows produced by the probing pipeline.

The file contract is one JSON object per line with exactly these fields:
prompt, response, confidence, loss_masked, case, question_id. Any missing or
mistyped field is a hard error naming the field and line, guarding the
cross-package contract: silently tolerating drift here would corrupt
training runs much later.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path


class SchemaError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class TrainingRow:
    prompt: str
    response: str
    confidence: float
    loss_masked: bool
    case: str
    question_id: str


_FIELD_TYPES = {
    "prompt": str,
    "response": str,
    "confidence": (int, float),
    "loss_masked": bool,
    "case": str,
    "question_id": str,
}


def _row_from_obj(obj: dict, where: str) -> TrainingRow:
    for field, types in _FIELD_TYPES.items():
        if field not in obj:
            raise SchemaError(f"{where}: missing field {field!r}")
        if not isinstance(obj[field], types):
            raise SchemaError(
                f"{where}: field {field!r} has type {type(obj[field]).__name__}"
            )
    if not 0.0 <= float(obj["confidence"]) <= 1.0:
        raise SchemaError(f"{where}: confidence {obj['confidence']} outside [0,1]")
    if obj["case"] == "all_wrong" and not obj["loss_masked"]:
        raise SchemaError(f"{where}: all_wrong row must be loss_masked")
    return TrainingRow(
        prompt=obj["prompt"],
        response=obj["response"],
        confidence=float(obj["confidence"]),
        loss_masked=obj["loss_masked"],
        case=obj["case"],
        question_id=obj["question_id"],
    )


def load_rows(path: str | Path) -> tuple[list[TrainingRow], Counter]:
    """All rows plus per-case counts.

    Raises SchemaError (with path and line number) on the first violation.
    """
    path = Path(path)
    rows: list[TrainingRow] = []
    cases: Counter = Counter()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            row = _row_from_obj(obj, where=f"{path}:{lineno}")
            rows.append(row)
            cases[row.case] += 1
    if not rows:
        raise SchemaError(f"{path}: no rows")
    return rows, cases
