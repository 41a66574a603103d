import numpy as np
import pytest

from ransomstream.engine import EngineConfig, IncrementalEngine, parse_groups, split_indices
from ransomstream.errors import EmptyHistory, InvalidConfig, UnlabeledStream
from ransomstream.events import SysmonEvent
from ransomstream.metrics import MetricsRecord, confusion, read_metrics_csv
from ransomstream.neural.model import GROUPS
from ransomstream.synth import SIGNAL_FEATURES

from conftest import SMALL_ARCH, SMALL_CONFIG, small_stream


def _ingest_count(engine, events):
    return [r.window_id for r in (engine.ingest(ev) for ev in events) if r is not None]


def test_window_counts_default_sizes():
    events = small_stream(60_000)
    engine = IncrementalEngine()
    assert _ingest_count(engine, events[:39_999]) == []
    assert _ingest_count(engine, events[39_999:40_000]) == [0]
    assert _ingest_count(engine, events[40_000:49_999]) == []
    assert _ingest_count(engine, events[49_999:]) == [1, 2]
    assert engine.open_window == []


def test_split_disjoint_and_sized():
    for n, wid in ((10, 0), (1000, 3), (10_000, 7)):
        tr, te = split_indices(n, wid, seed=5)
        assert len(np.intersect1d(tr, te)) == 0
        assert np.array_equal(np.union1d(tr, te), np.arange(n))
        assert len(tr) == round(0.8 * n)
    a, _ = split_indices(100, 1, 5)
    b, _ = split_indices(100, 2, 5)
    assert not np.array_equal(a, b)
    tr, te = split_indices(10, 0, 5, mode="chronological")
    assert list(te) == [8, 9]


def test_parse_groups():
    assert parse_groups("all") == GROUPS
    assert parse_groups("none") == ()
    assert set(parse_groups("lstm, conv")) == {"conv", "lstm"}
    with pytest.raises(InvalidConfig):
        parse_groups("conv,embedding")


@pytest.mark.parametrize("kw", [
    dict(initial_window=1), dict(train_fraction=1.0), dict(sgd_batch=9000),
    dict(reduction="median"), dict(dtype="float16"), dict(threshold=1.5),
])
def test_config_validation(kw):
    with pytest.raises(InvalidConfig):
        EngineConfig(**kw)


def test_config_roundtrip():
    cfg = SMALL_CONFIG.with_(freeze_groups=("conv", "lstm"))
    assert EngineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidConfig):
        EngineConfig.from_dict({"bogus": 1})


def test_run_produces_one_record_per_window(trained_engine):
    # 5000 events: baseline of 2000 then three windows of 1000
    assert [r.window_id for r in trained_engine.records] == [0, 1, 2, 3]
    for r in trained_engine.records:
        assert r.counts.total == 200 if r.window_id else r.counts.total == 400


def test_no_feature_change_means_no_retrain(trained_engine):
    assert trained_engine.retrain_count == 0
    assert set(trained_engine.features) == set(SIGNAL_FEATURES)


def test_freeze_contract(stream_5k):
    engine = IncrementalEngine(SMALL_CONFIG, SMALL_ARCH, seed=3)
    engine.run(stream_5k[:2000])
    before = {k: v.copy() for k, v in engine.model.params.items()}
    engine.run(stream_5k[2000:3000])
    after = engine.model.params
    for name in before:
        same = np.array_equal(before[name], after[name])
        assert same == name.startswith("conv"), name
    assert engine.retrain_count == 0


def test_freeze_all_is_pure_evaluation(stream_5k):
    engine = IncrementalEngine(SMALL_CONFIG.with_(freeze_groups=("conv", "lstm", "attention", "dense")), SMALL_ARCH, seed=3)
    engine.run(stream_5k[:2000])
    before = {k: v.copy() for k, v in engine.model.params.items()}
    engine.run(stream_5k[2000:3000])
    assert all(np.array_equal(before[k], engine.model.params[k]) for k in before)


def test_evaluation_uses_test_split_only(stream_5k, monkeypatch):
    engine = IncrementalEngine(SMALL_CONFIG, SMALL_ARCH, seed=3)
    seen = []
    original = engine.predict_proba_events

    def spy(events, *a, **kw):
        seen.append(list(events))
        return original(events, *a, **kw)

    monkeypatch.setattr(engine, "predict_proba_events", spy)
    engine.run(stream_5k[:2000])
    _, te = split_indices(2000, 0, 3)
    assert [id(e) for e in seen[-1]] == [id(stream_5k[i]) for i in te]
    assert len(engine.history) == 1600
    assert not {id(e) for e in engine.history} & {id(e) for e in seen[-1]}


def _relabel_drift(events):
    """Move the class signal into six other features and blank the usual ones."""
    out = []
    for ev in events:
        fields = dict(ev.fields)
        for name in SIGNAL_FEATURES:
            fields[name] = "absent"
        for name in ("f07", "f08", "f09", "f10", "f11", "f12"):
            fields[name] = f"{name}-{'hot' if ev.is_ransomware else 'cold'}"
        out.append(SysmonEvent(ev.event_id, fields, ev.timestamp, ev.label, ev.family))
    return out


def test_drift_batch_triggers_single_retrain(stream_5k):
    engine = IncrementalEngine(SMALL_CONFIG, SMALL_ARCH, seed=3)
    engine.run(stream_5k[:2000])
    assert engine.retrain_count == 0
    drift = _relabel_drift(small_stream(2000, benign_fraction=0.5, seed=21))
    outcomes = [engine.feed(ev) for ev in drift]
    done = [o for o in outcomes if o is not None]
    assert [o.retrained for o in done] == [True, False]
    assert engine.retrain_count == 1
    assert set(engine.features) == {"f07", "f08", "f09", "f10", "f11", "f12"}


def test_empty_history():
    with pytest.raises(EmptyHistory):
        IncrementalEngine(SMALL_CONFIG, SMALL_ARCH).retrain_from_history(["CallTrace"])


def test_self_fit_on_balanced_history():
    events = small_stream(2000, benign_fraction=0.5)
    cfg = SMALL_CONFIG.with_(initial_epochs=1, retrain_epochs=30)
    engine = IncrementalEngine(cfg, SMALL_ARCH.with_(filters=8, units=16), seed=4)
    engine.run(events)
    engine.retrain_from_history(SIGNAL_FEATURES, window_id=0)
    _, te = split_indices(2000, 0, 4)
    test = [events[i] for i in te]
    pred = engine.predict_proba_events(test) >= 0.5
    rec = MetricsRecord.from_counts(0, confusion([e.label for e in test], pred), 0.0, 0)
    assert rec.f2 >= 0.95
    assert engine.retrain_count == 1


def test_unlabeled_window_rejected(stream_5k):
    events = [SysmonEvent(e.event_id, e.fields, e.timestamp) for e in stream_5k[:2000]]
    with pytest.raises(UnlabeledStream):
        IncrementalEngine(SMALL_CONFIG, SMALL_ARCH).run(events)


def test_snapshot_published(trained_engine):
    snap = trained_engine.snapshot
    assert snap.window_id == 3
    probs = trained_engine.infer(small_stream(300, seed=11))
    assert probs.shape == (300,) and np.all((probs >= 0) & (probs <= 1))


class Crash(Exception):
    pass


def _csv_core(path):
    return [{k: v for k, v in row.items() if k not in ("timestamp_ms", "runtime_s")} for row in read_metrics_csv(path)]


@pytest.mark.parametrize("crash_at", [1, 2])
def test_kill_and_resume(stream_5k, tmp_path, crash_at):
    ref_dir, run_dir = tmp_path / "ref", tmp_path / "run"
    ref_dir.mkdir(), run_dir.mkdir()
    ref = IncrementalEngine(SMALL_CONFIG, SMALL_ARCH, seed=3, checkpoint_path=ref_dir / "m.ckpt", metrics_path=ref_dir / "m.csv")
    ref.run(stream_5k)

    def boom(wid):
        if wid == crash_at:
            raise Crash

    first = IncrementalEngine(
        SMALL_CONFIG, SMALL_ARCH, seed=3, checkpoint_path=run_dir / "m.ckpt",
        metrics_path=run_dir / "m.csv", hooks={"after_checkpoint": boom},
    )
    with pytest.raises(Crash):
        first.run(stream_5k)
    # the crash landed after the checkpoint but before the metrics row
    assert len(read_metrics_csv(run_dir / "m.csv")) == crash_at
    resumed = IncrementalEngine.resume(run_dir / "m.ckpt", SMALL_CONFIG, run_dir / "m.csv")
    records = resumed.run(stream_5k)
    assert len(records) <= 4 - crash_at
    assert _csv_core(run_dir / "m.csv") == _csv_core(ref_dir / "m.csv")
    assert np.array_equal(resumed.model.params["dense0.w"], ref.model.params["dense0.w"])
