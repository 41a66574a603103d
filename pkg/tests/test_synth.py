import hashlib
import json

import numpy as np
import pytest

from ransomstream.errors import InvalidConfig
from ransomstream.events import read_events, validate_stream
from ransomstream.synth import (
    FamilySpec,
    GeneratorConfig,
    build_schedule,
    describe,
    generate,
    generate_events,
    stump_accuracy,
)


@pytest.fixture(scope="module")
def small_stream():
    cfg = GeneratorConfig.scaled(20_000)
    return cfg, list(generate_events(cfg))


def test_all_benign():
    cfg = GeneratorConfig.scaled(2_000, benign_fraction=1.0)
    assert all(e.label == "benign" for e in generate_events(cfg))
    assert describe(cfg)["counts"]["ransomware"] == 0


def test_no_families_benign_only():
    cfg = GeneratorConfig(total_events=500, benign_fraction=1.0, families=())
    m = describe(cfg)
    assert m["families"] == [] and m["counts"] == {"benign": 500, "ransomware": 0}


def test_onsets_respected(small_stream):
    cfg, events = small_stream
    onset = {f.name: f.onset for f in cfg.families}
    for i, e in enumerate(events):
        if e.family is not None:
            assert i >= onset[e.family]


def test_default_has_six_families():
    m = describe(GeneratorConfig())
    assert len(m["families"]) == 6
    onsets = [f["onset"] for f in m["families"]]
    assert onsets == sorted(onsets) and onsets[-1] < 200_000


def test_manifest_matches_rescan(small_stream, tmp_path):
    cfg, _ = small_stream
    path = tmp_path / "s.jsonl"
    manifest = generate(cfg, path)
    events = read_events(path, __import__("ransomstream.events", fromlist=["default_schema"]).default_schema())
    rep = validate_stream(events)
    assert manifest["counts"]["ransomware"] == rep.per_label["ransomware"]
    assert manifest["counts"]["benign"] == rep.per_label["benign"]
    for fam in manifest["families"]:
        assert fam["count"] == rep.per_family.get(fam["name"], 0)
        idx = [i for i, e in enumerate(events) if e.family == fam["name"]]
        assert fam["first_index"] == (idx[0] if idx else None)


def test_determinism(tmp_path):
    cfg = GeneratorConfig.scaled(3_000)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    generate(cfg, a)
    generate(cfg, b)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    c = tmp_path / "c.jsonl"
    generate(GeneratorConfig.scaled(3_000, seed=8), c)
    assert a.read_bytes() != c.read_bytes()


def test_class_ratio_exact():
    cfg = GeneratorConfig()
    sched = build_schedule(cfg)
    frac = 1 - sched.labels.mean()
    assert abs(frac - 0.88) <= 0.01


def test_bursts_contiguous():
    sched = build_schedule(GeneratorConfig())
    for start, length, _ in sched.bursts:
        assert 50 <= length
        assert sched.labels[start:start + length].all()
    # bursts are separated by benign events
    for (s1, l1, _), (s2, _, _) in zip(sched.bursts, sched.bursts[1:]):
        assert s2 > s1 + l1


def test_family_signatures_distinct(small_stream):
    _, events = small_stream
    by_family = {}
    for e in events:
        if e.family:
            by_family.setdefault(e.family, set()).add(e["GrantedAccess"])
    sigs = [s - {"0x1fffff", "0x1f3fff", "0x1000", "0x1400", "0x1410", "0x101000", "0x40"} for s in by_family.values()]
    assert all(len(s) == 1 for s in sigs)
    assert len(set().union(*sigs)) == len(sigs)


def test_learnability_floor(small_stream):
    _, events = small_stream
    acc, feat, tok = stump_accuracy(events)
    assert acc >= 0.8


def test_signal_free_mode_has_no_signal():
    events = list(generate_events(GeneratorConfig.scaled(20_000, signal=False)))
    acc, _, _ = stump_accuracy(events)
    assert acc < 0.6


@pytest.mark.parametrize("kw", [
    dict(total_events=0),
    dict(benign_fraction=0.0),
    dict(benign_fraction=1.5),
    dict(families=(FamilySpec("a", 10), FamilySpec("b", 5))),
    dict(families=(FamilySpec("a", 10), FamilySpec("a", 20))),
    dict(families=(FamilySpec("a", 10**9),)),
    dict(burst_min=10, burst_max=5),
])
def test_invalid_config(kw):
    with pytest.raises(InvalidConfig):
        build_schedule(GeneratorConfig(**kw))


def test_config_json_roundtrip():
    cfg = GeneratorConfig.scaled(1000, seed=3)
    assert GeneratorConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
