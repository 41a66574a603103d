"""Seeded synthetic Sysmon-style event streams with staggered ransomware families.

The stream is built in two stages. A *schedule* fixes, for every position,
the label and family (ransomware arrives in contiguous bursts); it depends
only on the config, so ``describe`` can report exact counts without
generating field values. Field values are then drawn from per-class token
profiles. Each family owns a signature (module names in CallTrace, access
masks in GrantedAccess, dropped executables in TargetImage) on top of
behaviour shared by all families.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidConfig
from .events import ABSENT, BENIGN, EVENT_NAMES, RANSOMWARE, EventSchema, FieldMap, SysmonEvent, default_schema, serialize_event

SIGNAL_FEATURES = ("CallTrace", "GrantedAccess", "SourceUser", "TargetImage", "TargetUser", "Task")
BASE_TIMESTAMP = 1_700_000_000_000


@dataclass(frozen=True)
class FamilySpec:
    name: str
    onset: int


_DEFAULT_ONSETS = (0, 20_000, 60_000, 95_000, 130_000, 165_000)


def default_families(total_events: int = 200_000) -> tuple[FamilySpec, ...]:
    """Six families; onsets are placed for a 200k stream and scaled proportionally otherwise."""
    onsets = [onset * total_events // 200_000 for onset in _DEFAULT_ONSETS]
    return tuple(FamilySpec(f"family-{i + 1}", onset) for i, onset in enumerate(onsets))


@dataclass(frozen=True)
class GeneratorConfig:
    total_events: int = 200_000
    benign_fraction: float = 0.88
    families: tuple[FamilySpec, ...] = field(default_factory=default_families)
    seed: int = 7
    signal: bool = True
    burst_min: int = 50
    burst_max: int = 400
    # probability that a ransomware event shows its family/shared behaviour in a given signal feature
    signature_rate: float = 0.85
    # probability that a benign event borrows a ransomware-looking value in a given signal feature
    benign_mimic_rate: float = 0.01

    def validate(self) -> None:
        if self.total_events < 1:
            raise InvalidConfig("total_events must be positive")
        if not (0.0 < self.benign_fraction <= 1.0):
            raise InvalidConfig("benign_fraction must lie in (0, 1]")
        if not (1 <= self.burst_min <= self.burst_max):
            raise InvalidConfig("need 1 <= burst_min <= burst_max")
        onsets = [f.onset for f in self.families]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise InvalidConfig("family onsets must be strictly increasing")
        if onsets and not (0 <= onsets[0] and onsets[-1] < self.total_events):
            raise InvalidConfig("family onsets must lie inside the stream")
        if len({f.name for f in self.families}) != len(self.families):
            raise InvalidConfig("family names must be unique")
        if self.benign_fraction < 1.0 and not self.families:
            raise InvalidConfig("ransomware events requested but no families configured")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = [asdict(f) for f in self.families]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        doc = dict(doc)
        if "families" in doc:
            doc["families"] = tuple(FamilySpec(f["name"], int(f["onset"])) for f in doc["families"])
        return cls(**doc)

    @classmethod
    def scaled(cls, total_events: int, **kw) -> "GeneratorConfig":
        return cls(total_events=total_events, families=default_families(total_events), **kw)


# --------------------------------------------------------------------------- schedule


@dataclass
class Schedule:
    labels: np.ndarray  # 1 = ransomware
    family_idx: np.ndarray  # -1 for benign
    bursts: list[tuple[int, int, int]]  # (start, length, family index)


def build_schedule(config: GeneratorConfig) -> Schedule:
    config.validate()
    n = config.total_events
    rng = np.random.default_rng([config.seed, 1])
    n_ransom = int(round((1.0 - config.benign_fraction) * n))
    labels = np.zeros(n, dtype=np.int8)
    family_idx = np.full(n, -1, dtype=np.int16)
    if n_ransom == 0:
        return Schedule(labels, family_idx, [])

    lengths: list[int] = []
    remaining = n_ransom
    while remaining > 0:
        ln = int(rng.integers(config.burst_min, config.burst_max + 1))
        ln = min(ln, remaining)
        if ln < config.burst_min and lengths:
            lengths[-1] += ln
        else:
            lengths.append(ln)
        remaining -= ln

    n_benign = n - n_ransom
    # no ransomware before the first onset; interior gaps need one benign event so bursts stay distinct
    lead = config.families[0].onset
    n_gaps = len(lengths) + 1
    spare = n_benign - (len(lengths) - 1) - lead
    if spare < 0:
        raise InvalidConfig("benign_fraction too low for the requested bursts and first onset")
    gaps = rng.multinomial(spare, np.full(n_gaps, 1.0 / n_gaps))
    gaps[1:-1] += 1
    gaps[0] += lead

    onsets = [f.onset for f in config.families]
    bursts = []
    introduced: set[int] = set()
    pos = 0
    for gap, ln in zip(gaps[:-1], lengths):
        pos += int(gap)
        active = [i for i, onset in enumerate(onsets) if onset <= pos]
        fresh = [i for i in active if i not in introduced]
        fam = fresh[0] if fresh else active[int(rng.integers(len(active)))]
        introduced.add(fam)
        bursts.append((pos, ln, fam))
        pos += ln

    for start, ln, fam in bursts:
        labels[start : start + ln] = 1
        family_idx[start : start + ln] = fam
    return Schedule(labels, family_idx, bursts)


# --------------------------------------------------------------------------- profiles

_SYS = "C:\\Windows\\System32\\"
_BENIGN_DLLS = ["ntdll.dll", "KERNELBASE.dll", "kernel32.dll", "user32.dll", "combase.dll", "ole32.dll", "shell32.dll", "advapi32.dll", "rpcrt4.dll", "gdi32full.dll"]
_OFFSETS = ["+9d4c4", "+2c13e", "+17034", "+6e1a2", "+3b7f0"]
_CRYPTO_DLLS = ["bcrypt.dll", "rsaenh.dll", "cryptsp.dll", "bcryptprimitives.dll"]
_PORTABLE_APPS = ["Firefox", "Notepad++", "GIMP", "VLC", "7-Zip", "LibreOffice", "Audacity", "Inkscape", "FileZilla", "KeePass", "OpenTTD", "SuperTuxKart", "Thunderbird", "Blender", "HandBrake"]
_SYSTEM_IMAGES = ["svchost.exe", "explorer.exe", "lsass.exe", "services.exe", "SearchIndexer.exe", "RuntimeBroker.exe", "conhost.exe", "dllhost.exe"]
_SHARED_RANSOM_TOOLS = ["vssadmin.exe", "cmd.exe", "wbem\\WMIC.exe", "bcdedit.exe", "wevtutil.exe"]
_BENIGN_USERS = {"NT AUTHORITY\\SYSTEM": 0.45, "LAB-PC\\analyst": 0.3, "NT AUTHORITY\\NETWORK SERVICE": 0.13, "NT AUTHORITY\\LOCAL SERVICE": 0.12}
_RANSOM_USERS = {"LAB-PC\\victim": 0.8, "NT AUTHORITY\\SYSTEM": 0.2}
_BENIGN_TARGET_USERS = {"NT AUTHORITY\\SYSTEM": 0.55, "LAB-PC\\analyst": 0.3, "NT AUTHORITY\\LOCAL SERVICE": 0.15}
_RANSOM_TARGET_USERS = {"LAB-PC\\victim": 0.7, "NT AUTHORITY\\SYSTEM": 0.3}
_BENIGN_ACCESS = {"0x1000": 0.35, "0x1400": 0.15, "0x1410": 0.25, "0x101000": 0.1, "0x40": 0.15}
_SHARED_RANSOM_ACCESS = {"0x1fffff": 0.7, "0x1f3fff": 0.3}
_BENIGN_CODES = {1: 0.08, 3: 0.08, 5: 0.07, 7: 0.3, 10: 0.15, 11: 0.1, 12: 0.06, 13: 0.1, 22: 0.06}
_RANSOM_CODES = {11: 0.3, 23: 0.15, 10: 0.15, 13: 0.1, 1: 0.07, 7: 0.1, 2: 0.05, 8: 0.03, 25: 0.02, 5: 0.03}


class _Uniforms:
    """Buffered U(0,1) draws; one numpy call per block keeps per-event cost low."""

    def __init__(self, rng, block: int = 65536):
        self._rng = rng
        self._block = block
        self._buf = rng.random(block).tolist()
        self._i = 0

    def random(self) -> float:
        if self._i == self._block:
            self._buf = self._rng.random(self._block).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u

    def integers(self, n: int) -> int:
        return min(int(self.random() * n), n - 1)


_CDF_CACHE: dict[int, tuple[list, list]] = {}


def _choice(rng, table: dict):
    key = id(table)
    cached = _CDF_CACHE.get(key)
    if cached is None:
        keys = list(table)
        cdf = np.cumsum([table[k] for k in keys])
        cached = _CDF_CACHE[key] = (keys, (cdf / cdf[-1]).tolist())
    keys, cdf = cached
    u = rng.random()
    for k, c in zip(keys, cdf):
        if u < c:
            return k
    return keys[-1]


class _Profiles:
    """Token profiles for benign events and each ransomware family."""

    def __init__(self, families: Sequence[FamilySpec], seed: int):
        rng = np.random.default_rng([seed, 2])  # signature strings only; not buffered
        self.family_modules = []
        self.family_access = []
        self.family_exes = []
        for i, fam in enumerate(families):
            stem = "".join(chr(ord("a") + int(c)) for c in rng.integers(0, 26, size=6))
            self.family_modules.append([f"{stem}{j}.dll+{int(rng.integers(0x1000, 0xffff)):x}" for j in range(3)])
            self.family_access.append(f"0x{int(rng.integers(0x1000, 0x1fffff)):x}")
            self.family_exes.append([f"{stem}_{int(rng.integers(100, 999))}.exe" for _ in range(4)])

    @staticmethod
    def benign_calltrace(rng) -> str:
        frames = 2 + rng.integers(3)
        parts = []
        for _ in range(frames):
            dll = _BENIGN_DLLS[int(rng.integers(len(_BENIGN_DLLS)))]
            parts.append(_SYS + dll + _OFFSETS[int(rng.integers(len(_OFFSETS)))])
        return "|".join(parts)

    def ransom_calltrace(self, rng, fam: int) -> str:
        mods = self.family_modules[fam]
        parts = [_SYS + "ntdll.dll" + _OFFSETS[int(rng.integers(len(_OFFSETS)))]]
        parts.append(_SYS + _CRYPTO_DLLS[int(rng.integers(len(_CRYPTO_DLLS)))] + _OFFSETS[int(rng.integers(len(_OFFSETS)))])
        parts.append("C:\\Users\\victim\\AppData\\Local\\Temp\\" + mods[int(rng.integers(len(mods)))])
        return "|".join(parts)

    @staticmethod
    def benign_image(rng) -> str:
        if rng.random() < 0.6:
            app = _PORTABLE_APPS[int(rng.integers(len(_PORTABLE_APPS)))]
            return f"C:\\PortableApps\\{app}Portable\\App\\{app}\\{app}.exe"
        return _SYS + _SYSTEM_IMAGES[int(rng.integers(len(_SYSTEM_IMAGES)))]

    def ransom_image(self, rng, fam: int) -> str:
        if rng.random() < 0.35:
            return _SYS + _SHARED_RANSOM_TOOLS[int(rng.integers(len(_SHARED_RANSOM_TOOLS)))]
        exes = self.family_exes[fam]
        return "C:\\Users\\victim\\AppData\\Local\\Temp\\" + exes[int(rng.integers(len(exes)))]

    def ransom_access(self, rng, fam: int) -> str:
        if rng.random() < 0.4:
            return self.family_access[fam]
        return _choice(rng, _SHARED_RANSOM_ACCESS)

    def benign_value(self, rng, name: str) -> str:
        if name == "CallTrace":
            return self.benign_calltrace(rng)
        if name == "GrantedAccess":
            return _choice(rng, _BENIGN_ACCESS)
        if name == "SourceUser":
            return _choice(rng, _BENIGN_USERS)
        if name == "TargetImage":
            return self.benign_image(rng)
        if name == "TargetUser":
            return _choice(rng, _BENIGN_TARGET_USERS)
        raise KeyError(name)

    def ransom_value(self, rng, name: str, fam: int) -> str:
        if name == "CallTrace":
            return self.ransom_calltrace(rng, fam)
        if name == "GrantedAccess":
            return self.ransom_access(rng, fam)
        if name == "SourceUser":
            return _choice(rng, _RANSOM_USERS)
        if name == "TargetImage":
            return self.ransom_image(rng, fam)
        if name == "TargetUser":
            return _choice(rng, _RANSOM_TARGET_USERS)
        raise KeyError(name)


def _noise_pools(schema: EventSchema, seed: int):
    """Per opaque slot: value pool and absent-probability, identical for both classes."""
    rng = np.random.default_rng([seed, 3])
    pools = {}
    for name in schema.feature_names:
        if name in SIGNAL_FEATURES:
            continue
        size = int(rng.integers(2, 30))
        pools[name] = ([f"{name}-{j:03d}" for j in range(size)], float(rng.uniform(0.0, 0.3)))
    return pools


# --------------------------------------------------------------------------- generation


def generate_events(config: GeneratorConfig = GeneratorConfig(), schema: EventSchema | None = None) -> Iterator[SysmonEvent]:
    """Yield the configured stream as SysmonEvent objects, in order."""
    schema = schema or default_schema()
    missing = [f for f in SIGNAL_FEATURES if f not in schema.feature_names]
    if missing:
        raise InvalidConfig(f"schema lacks the generator's signal features {missing}")
    sched = build_schedule(config)
    profiles = _Profiles(config.families, config.seed)
    pools = _noise_pools(schema, config.seed)
    rng = _Uniforms(np.random.default_rng([config.seed, 4]))
    names = schema.feature_names
    ts = BASE_TIMESTAMP
    fam_names = [f.name for f in config.families]
    for pos in range(config.total_events):
        ransom = bool(sched.labels[pos])
        fam = int(sched.family_idx[pos])
        ts += 1 + rng.integers(19)
        use_ransom_profile = ransom and config.signal
        code = _choice(rng, _RANSOM_CODES if use_ransom_profile else _BENIGN_CODES)
        values = []
        for name in names:
            if name == "Task":
                values.append(EVENT_NAMES[code])
            elif name in SIGNAL_FEATURES:
                if use_ransom_profile:
                    v = profiles.ransom_value(rng, name, fam) if rng.random() < config.signature_rate else profiles.benign_value(rng, name)
                elif config.signal and fam_names and rng.random() < config.benign_mimic_rate:
                    v = profiles.ransom_value(rng, name, int(rng.integers(len(fam_names))))
                else:
                    v = profiles.benign_value(rng, name)
                values.append(v)
            else:
                pool, p_absent = pools[name]
                values.append(ABSENT if rng.random() < p_absent else pool[int(rng.integers(len(pool)))])
        yield SysmonEvent(
            code,
            FieldMap(names, tuple(values)),
            ts,
            RANSOMWARE if ransom else BENIGN,
            fam_names[fam] if ransom else None,
        )


def generate(config: GeneratorConfig, path: str | Path, schema: EventSchema | None = None) -> dict:
    """Write the stream as JSONL and return its manifest."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in generate_events(config, schema):
            fh.write(serialize_event(ev))
            fh.write("\n")
    return describe(config)


def describe(config: GeneratorConfig) -> dict:
    """Ground-truth manifest: onsets, first appearance and counts per class/family."""
    sched = build_schedule(config)
    fam_counts = Counter(int(i) for i in sched.family_idx[sched.family_idx >= 0])
    first_seen = {}
    for start, _, fam in sched.bursts:
        first_seen.setdefault(fam, start)
    n_ransom = int(sched.labels.sum())
    return {
        "total_events": config.total_events,
        "seed": config.seed,
        "signal": config.signal,
        "counts": {BENIGN: config.total_events - n_ransom, RANSOMWARE: n_ransom},
        "bursts": len(sched.bursts),
        "families": [
            {
                "name": f.name,
                "onset": f.onset,
                "first_index": first_seen.get(i),
                "count": fam_counts.get(i, 0),
            }
            for i, f in enumerate(config.families)
        ],
    }


def stump_accuracy(events: Sequence[SysmonEvent], features: Sequence[str] = SIGNAL_FEATURES, seed: int = 0) -> tuple[float, str, str]:
    """Best depth-1 rule "token present in feature => ransomware" on a class-balanced sample.

    Returns (accuracy, feature, token).
    """
    from .embedding import tokenize_value

    pos = [e for e in events if e.label == RANSOMWARE]
    neg = [e for e in events if e.label == BENIGN]
    n = min(len(pos), len(neg))
    if n == 0:
        raise ValueError("stump needs both classes")
    rng = np.random.default_rng(seed)
    pos = [pos[i] for i in rng.choice(len(pos), n, replace=False)]
    neg = [neg[i] for i in rng.choice(len(neg), n, replace=False)]
    best = (0.0, "", "")
    for feat in features:
        hits_pos: Counter = Counter()
        hits_neg: Counter = Counter()
        for e in pos:
            hits_pos.update(set(tokenize_value(e.get(feat))))
        for e in neg:
            hits_neg.update(set(tokenize_value(e.get(feat))))
        for tok in set(hits_pos) | set(hits_neg):
            acc = (hits_pos[tok] + (n - hits_neg[tok])) / (2 * n)
            if acc > best[0]:
                best = (acc, feat, tok)
    return best


def manifest_json(config: GeneratorConfig) -> str:
    return json.dumps(describe(config), indent=2, sort_keys=True)
