import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ransomstream.errors import LengthMismatch
from ransomstream.metrics import (
    CSV_COLUMNS,
    ConfusionCounts,
    MetricsRecord,
    MetricsWriter,
    base_rate_f2,
    confusion,
    f2_series,
    f_beta,
    rates,
    read_metrics_csv,
    summarize,
    write_f2_series,
)


def test_confusion_all_correct():
    y = ["benign", "ransomware", "ransomware", "benign"]
    c = confusion(y, y)
    assert c.fp == 0 and c.fn == 0 and c.tp == 2 and c.tn == 2


def test_confusion_all_flagged():
    c = confusion(["benign"] * 7, ["ransomware"] * 7)
    assert c == ConfusionCounts(tp=0, fp=7, tn=0, fn=0)


def test_confusion_hand_tally():
    rng = np.random.default_rng(20)
    y = rng.integers(0, 2, 20)
    p = rng.integers(0, 2, 20)
    tally = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for a, b in zip(y, p):
        key = ("t" if a == b else "f") + ("p" if b == 1 else "n")
        tally[key] += 1
    assert confusion(y, p) == ConfusionCounts(**tally)
    assert confusion(y, p).total == 20


def test_confusion_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [1])


def test_f_beta_values():
    assert f_beta(1.0, 1.0, 2) == 1.0
    assert f_beta(1.0, 1.0, 0.5) == 1.0
    assert abs(f_beta(0.8, 0.9, 2) - 5 * 0.72 / (3.2 + 0.9)) < 1e-15
    assert abs(f_beta(0.8, 0.9, 2) - 0.87805) < 1e-5
    assert round(f_beta(0.9961, 0.9962, 2), 4) == 0.9962 or abs(f_beta(0.9961, 0.9962, 2) - 0.9961) < 1e-4
    v, flag = f_beta(0.0, 0.0, 2, return_flag=True)
    assert v == 0.0 and flag


@settings(max_examples=200, deadline=None)
@given(st.floats(0.001, 1), st.floats(0.001, 1))
def test_f1_is_harmonic_mean(p, r):
    assert abs(f_beta(p, r, 1) - 2 * p * r / (p + r)) <= 1e-12


def test_f_beta_monotone_grid():
    grid = np.linspace(0.01, 1, 40)
    for beta in (0.5, 1, 2):
        vals = np.array([[f_beta(p, r, beta) for r in grid] for p in grid])
        assert np.all(np.diff(vals, axis=0) >= -1e-15) and np.all(np.diff(vals, axis=1) >= -1e-15)


def test_f2_weights_recall():
    d = 0.01
    for s in np.linspace(0.1, 0.9, 17):
        assert f_beta(s, s + d, 2) - f_beta(s, s, 2) > f_beta(s + d, s, 2) - f_beta(s, s, 2)


def test_rates_fixture():
    c = ConfusionCounts(tp=9962, fn=38, fp=39, tn=90000)
    r = rates(c)
    assert abs(r.recall - 0.9962) < 1e-12
    assert abs(r.precision - 9962 / 10001) < 1e-12 and round(r.precision, 4) == 0.9961
    assert abs(r.recall + r.fnr - 1) < 1e-12


def test_rates_perfect_and_zero():
    r = rates(ConfusionCounts(tp=50, tn=50))
    assert (r.precision, r.recall, r.accuracy, r.fpr, r.fnr) == (1.0, 1.0, 1.0, 0.0, 0.0)
    r = rates(ConfusionCounts(tp=0, fn=10))
    assert r.recall == 0.0 and r.fnr == 1.0
    assert "precision" in r.undefined and "fpr" in r.undefined


def test_rates_empty_flags():
    r = rates(ConfusionCounts())
    assert set(r.undefined) == {"precision", "recall", "accuracy", "fpr", "fnr"}
    assert tuple(r) == (0.0,) * 5


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_record_consistency(tp, fp, tn, fn):
    rec = MetricsRecord.from_counts(3, ConfusionCounts(tp, fp, tn, fn), 1.5, 0)
    assert abs(rec.f2 - f_beta(rec.precision, rec.recall, 2)) <= 1e-12
    for name in ("precision", "recall", "f1", "f2", "accuracy", "fpr", "fnr"):
        assert 0.0 <= getattr(rec, name) <= 1.0
    if tp + fn:
        assert abs(rec.recall + rec.fnr - 1) <= 1e-12


def test_f2_series():
    recs = [MetricsRecord.from_counts(i, ConfusionCounts(tp=1), rt, 0) for i, rt in enumerate([10.0, 12.0])]
    assert f2_series(recs[:1]) == [(10.0, 1.0)]
    assert [x for x, _ in f2_series(recs)] == [10.0, 22.0]
    assert [x for x, _ in f2_series(recs[::-1])] == [10.0, 22.0]


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "m.csv"
    w = MetricsWriter(path)
    recs = [MetricsRecord.from_counts(i, ConfusionCounts(tp=3 + i, fp=1, tn=5, fn=i), 0.1 * (i + 1), 1000 + i) for i in range(3)]
    for r in recs:
        w.append(r)
    MetricsWriter(path)  # reopening must not duplicate the header
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 4
    back = read_metrics_csv(path)
    assert [b["f2"] for b in back] == [r.f2 for r in recs]
    write_f2_series(recs, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "window_id,elapsed_s,f2"


def test_summary_and_base_rate():
    recs = [MetricsRecord.from_counts(i, ConfusionCounts(tp=8, fp=2, tn=80, fn=0), 2.0, 0) for i in range(3)]
    s = summarize(recs, skip_baseline=True)
    assert s["windows"] == 2 and s["total_runtime_s"] == 4.0
    assert s["pooled"]["counts"]["tp"] == 16
    # every event flagged: precision = prevalence, recall = 1
    assert abs(base_rate_f2([1, 0, 0, 0]) - 5 * 0.25 / (4 * 0.25 + 1)) < 1e-15
    assert base_rate_f2([0, 0]) == 0.0
