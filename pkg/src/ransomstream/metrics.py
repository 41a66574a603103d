"""Detection metrics with ransomware as the positive class."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import LengthMismatch
from .events import RANSOMWARE

CSV_COLUMNS = ("window_id", "timestamp_ms", "precision", "recall", "f1", "f2", "accuracy", "fpr", "fnr", "runtime_s")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _as_positive(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind in "US":
        return arr == RANSOMWARE
    if arr.dtype == object:
        return np.array([v == RANSOMWARE or (not isinstance(v, str) and bool(v)) for v in arr], dtype=bool)
    return arr.astype(bool)


def confusion(labels, predictions) -> ConfusionCounts:
    """Counts over paired labels/predictions, given as class names or 0/1."""
    if len(labels) != len(predictions):
        raise LengthMismatch(f"{len(labels)} labels vs {len(predictions)} predictions")
    y = _as_positive(labels)
    p = _as_positive(predictions)
    tp = int(np.sum(y & p))
    fp = int(np.sum(~y & p))
    fn = int(np.sum(y & ~p))
    return ConfusionCounts(tp, fp, int(y.size - tp - fp - fn), fn)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def f_beta(precision: float, recall: float, beta: float = 2.0, *, return_flag: bool = False):
    """F-beta. Both inputs zero gives 0 with the undefined flag set."""
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        value, undefined = 0.0, True
    else:
        value, undefined = (1.0 + b2) * precision * recall / den, False
    return (value, undefined) if return_flag else value


@dataclass(frozen=True)
class Rates:
    precision: float
    recall: float
    accuracy: float
    fpr: float
    fnr: float
    undefined: frozenset = frozenset()

    def __iter__(self):
        return iter((self.precision, self.recall, self.accuracy, self.fpr, self.fnr))


def rates(counts: ConfusionCounts) -> Rates:
    c = counts
    undefined = set()
    values = {}
    for name, num, den in (
        ("precision", c.tp, c.tp + c.fp),
        ("recall", c.tp, c.tp + c.fn),
        ("accuracy", c.tp + c.tn, c.total),
        ("fpr", c.fp, c.fp + c.tn),
        ("fnr", c.fn, c.fn + c.tp),
    ):
        values[name], flag = _ratio(num, den)
        if flag:
            undefined.add(name)
    return Rates(undefined=frozenset(undefined), **values)


@dataclass
class MetricsRecord:
    window_id: int
    timestamp_ms: int
    precision: float
    recall: float
    f1: float
    f2: float
    accuracy: float
    fpr: float
    fnr: float
    runtime_s: float
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    undefined: tuple[str, ...] = ()

    @classmethod
    def from_counts(cls, window_id: int, counts: ConfusionCounts, runtime_s: float, timestamp_ms: int) -> "MetricsRecord":
        r = rates(counts)
        f1, f1_undef = f_beta(r.precision, r.recall, 1.0, return_flag=True)
        f2 = f_beta(r.precision, r.recall, 2.0)
        undefined = set(r.undefined)
        if f1_undef:
            undefined.update({"f1", "f2"})
        return cls(
            window_id, int(timestamp_ms), r.precision, r.recall, f1, f2, r.accuracy, r.fpr, r.fnr,
            float(runtime_s), counts, tuple(sorted(undefined)),
        )

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]

    def to_dict(self) -> dict:
        doc = {c: getattr(self, c) for c in CSV_COLUMNS}
        doc["counts"] = asdict(self.counts)
        doc["undefined"] = list(self.undefined)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsRecord":
        kw = {f.name: doc[f.name] for f in fields(cls) if f.name in CSV_COLUMNS}
        return cls(counts=ConfusionCounts(**doc.get("counts", {})), undefined=tuple(doc.get("undefined", ())), **kw)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Append-only metrics CSV; the header is written once for a new file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_COLUMNS)

    def append(self, record: MetricsRecord) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(v) for v in record.row()])
            fh.flush()


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (int(v) if k in ("window_id", "timestamp_ms") else float(v)) for k, v in row.items()})
    return out


def f2_series(records: Sequence[MetricsRecord]) -> list[tuple[float, float]]:
    """(cumulative runtime seconds, f2) for each record in window order."""
    ordered = sorted(records, key=lambda r: r.window_id)
    xs = np.cumsum([r.runtime_s for r in ordered]) if ordered else []
    return [(float(x), r.f2) for x, r in zip(xs, ordered)]


def write_f2_series(records: Sequence[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("window_id", "elapsed_s", "f2"))
        for r, (x, f2) in zip(sorted(records, key=lambda r: r.window_id), f2_series(records)):
            w.writerow((r.window_id, repr(x), repr(f2)))


def summarize(records: Iterable[MetricsRecord], *, skip_baseline: bool = False) -> dict:
    """Mean rates over windows, pooled counts and total runtime."""
    recs = [r for r in records if not (skip_baseline and r.window_id == 0)]
    if not recs:
        return {"windows": 0, "total_runtime_s": 0.0}
    doc = {"windows": len(recs)}
    for name in ("precision", "recall", "f1", "f2", "accuracy", "fpr", "fnr"):
        doc[f"mean_{name}"] = float(np.mean([getattr(r, name) for r in recs]))
    pooled = ConfusionCounts()
    for r in recs:
        pooled = pooled + r.counts
    pr = rates(pooled)
    doc["pooled"] = {
        "counts": asdict(pooled),
        "precision": pr.precision,
        "recall": pr.recall,
        "f2": f_beta(pr.precision, pr.recall, 2.0),
        "fpr": pr.fpr,
        "fnr": pr.fnr,
    }
    doc["min_f2"] = float(min(r.f2 for r in recs))
    doc["final_f2"] = recs[-1].f2
    doc["total_runtime_s"] = float(sum(r.runtime_s for r in recs))
    return doc


def comparison_report(results: dict[str, dict]) -> dict:
    """Per-variant summaries keyed by variant label; failed variants keep their error text."""
    return {"variants": results}


def write_json(doc, path: str | Path) -> None:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, (set, frozenset)):
            return sorted(o)
        raise TypeError(type(o).__name__)

    text = json.dumps(doc, indent=2, sort_keys=True, default=default, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def base_rate_f2(labels) -> float:
    """F2 of flagging every event as ransomware (the best constant predictor under F2)."""
    y = _as_positive(labels)
    if not y.any():
        return 0.0
    precision = float(y.mean())
    return f_beta(precision, 1.0, 2.0)


__all__ = [
    "CSV_COLUMNS", "ConfusionCounts", "MetricsRecord", "MetricsWriter", "Rates", "base_rate_f2",
    "comparison_report", "confusion", "f2_series", "f_beta", "rates", "read_metrics_csv", "summarize",
    "write_f2_series", "write_json",
]
