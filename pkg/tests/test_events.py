import json
import pickle

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ransomstream.errors import InvalidLabel, MalformedJson, MissingRequired, UnknownEventId
from ransomstream.events import (
    ABSENT,
    EVENT_NAMES,
    SUPPORTED_CODES,
    EventSchema,
    SysmonEvent,
    parse_event,
    serialize_event,
    validate_stream,
)
from ransomstream.synth import GeneratorConfig, generate_events


def test_default_schema_layout(schema):
    names = schema.feature_names
    assert len(names) == 52
    assert len(set(names)) == 52
    assert names[:6] == ("CallTrace", "GrantedAccess", "SourceUser", "TargetImage", "TargetUser", "Task")
    assert names[6] == "f07" and names[-1] == "f52"


def test_supported_codes_match_table():
    assert SUPPORTED_CODES == {1, 2, 3, 5, 7, 8, 10, 11, 12, 13, 17, 22, 23, 25}
    assert EVENT_NAMES[11] == "FileCreate"


def test_parse_basic(schema):
    ev = parse_event('{"event_id":1,"Task":"Process Create","label":"benign","timestamp":5}', schema)
    assert ev.event_id == 1
    assert ev.label == "benign"
    assert ev.timestamp == 5
    assert ev["Task"] == "Process Create"


def test_unknown_code(schema):
    with pytest.raises(UnknownEventId):
        parse_event('{"event_id":99,"Task":"x"}', schema)


@pytest.mark.parametrize("line", ["{not json", "", "[1,2]", '{"event_id":"one","Task":"x"}', '{"event_id":1.5,"Task":"x"}', b"\xff\xfe"])
def test_malformed(schema, line):
    with pytest.raises(MalformedJson):
        parse_event(line, schema)


def test_missing_required(schema):
    with pytest.raises(MissingRequired):
        parse_event('{"event_id":3,"CallTrace":"a"}', schema)
    with pytest.raises(MissingRequired):
        parse_event('{"event_id":3,"Task":"   "}', schema)


def test_bad_label(schema):
    with pytest.raises(InvalidLabel):
        parse_event('{"event_id":3,"Task":"x","label":"malware"}', schema)


def test_absent_fill_schema_walk(schema):
    record = {"event_id": 10, "Task": "ProcessAccess", "CallTrace": "a|b", "GrantedAccess": "0x1000",
              "SourceUser": "u", "TargetImage": "t.exe", "TargetUser": "v"}
    ev = parse_event(json.dumps(record), schema)
    # walk the schema independently of the parser
    populated = [n for n in schema.feature_names if ev.fields[n] != ABSENT]
    absent = [n for n in schema.feature_names if ev.fields[n] == ABSENT]
    assert len(ev.fields) == 52
    assert populated == [n for n in schema.feature_names if n in record]
    assert len(absent) == 46
    assert list(ev.fields) == list(schema.feature_names)


def test_numeric_values_become_strings(schema):
    ev = parse_event('{"event_id":"3","Task":"x","f07":12,"f08":true,"f09":null,"f10":{"a":1}}', schema)
    assert ev.event_id == 3
    assert ev["f07"] == "12" and ev["f08"] == "true" and ev["f09"] == ABSENT and ev["f10"] == '{"a":1}'


def test_schema_rejects_duplicates():
    with pytest.raises(ValueError):
        EventSchema(("a", "a"))
    with pytest.raises(ValueError):
        EventSchema(("a",), {1: {"b"}})


def test_schema_roundtrip(schema, tmp_path):
    path = tmp_path / "schema.json"
    path.write_text(json.dumps(schema.to_dict()))
    assert EventSchema.load(path) == schema


_values = st.one_of(st.just(ABSENT), st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20).filter(lambda s: s.strip()))


@settings(max_examples=60, deadline=None)
@given(code=st.sampled_from(sorted(SUPPORTED_CODES)), vals=st.lists(_values, min_size=52, max_size=52),
       ts=st.integers(0, 2**53), label=st.sampled_from([None, "benign", "ransomware"]))
def test_roundtrip_property(schema, code, vals, ts, label):
    vals[5] = vals[5] if vals[5] != ABSENT else "Task"
    ev = SysmonEvent(code, dict(zip(schema.feature_names, vals)), ts, label, None)
    back = parse_event(serialize_event(ev), schema)
    assert back == SysmonEvent(code, back.fields, ts, label, None)
    assert dict(back.fields) == dict(ev.fields)
    assert parse_event(serialize_event(ev, drop_absent=True), schema).fields == back.fields


def test_pickle(schema):
    ev = parse_event('{"event_id":1,"Task":"x","label":"ransomware","family":"f"}', schema)
    again = pickle.loads(pickle.dumps(ev))
    assert dict(again.fields) == dict(ev.fields) and again.label == ev.label and again.family == "f"


def test_validate_empty():
    rep = validate_stream([])
    assert rep.total == 0 and rep.per_code == {} and rep.per_label == {"benign": 0, "ransomware": 0, "unlabeled": 0}
    assert rep.benign_fraction == 0.0


def test_validate_counts(schema):
    lines = ['{"event_id":1,"Task":"x","label":"benign"}'] * 3 + ['{"event_id":11,"Task":"y","label":"ransomware"}']
    events = [parse_event(line, schema) for line in lines]
    rep = validate_stream(events, schema)
    assert rep.per_label["benign"] == 3 and rep.per_label["ransomware"] == 1
    assert rep.per_code == {1: 3, 11: 1}
    assert rep.missing_rate["Task"] == 0.0 and rep.missing_rate["f07"] == 1.0


def test_validate_generator_ratio():
    # binomial counting oracle: the generator is configured at 0.885 benign
    cfg = GeneratorConfig.scaled(10_000, benign_fraction=0.885)
    events = list(generate_events(cfg))
    rep = validate_stream(events)
    benign = sum(e.label == "benign" for e in events)
    assert rep.benign_fraction == benign / 10_000
    assert abs(rep.benign_fraction - 0.885) <= 0.02
