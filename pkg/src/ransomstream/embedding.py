"""Character n-gram embeddings with a hashed bucket table.

A token is wrapped in boundary markers ``<`` and ``>``, decomposed into all
character n-grams in ``[n_min, n_max]`` and embedded as the sum of the bucket
vectors those n-grams hash to. Bucket vectors are not trained: each row is a
seeded pseudo-random vector, uniform in ``[-1/dim, 1/dim]``, generated on
demand from (seed, row) so the full ``buckets x dim`` table never has to be
materialized.
"""

from __future__ import annotations

import re
import threading
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyToken, UnknownFeature
from .events import ABSENT, SysmonEvent

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

TOKEN_SPLIT = re.compile(r"[\s\\/|]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class NgramVocabConfig:
    n_min: int = 3
    n_max: int = 6
    dim: int = 16
    buckets: int = 2**20
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.dim < 1 or self.buckets < 1:
            raise ValueError("dim and buckets must be positive")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in 64 bits")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc) -> "NgramVocabConfig":
        return cls(**{k: int(doc[k]) for k in ("n_min", "n_max", "dim", "buckets", "seed")})


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def extract_ngrams(word: str, config: NgramVocabConfig) -> list[str]:
    """All n-grams of ``<word>`` for n in [n_min, n_max], increasing n, left to right.

    If the marked token is shorter than every requested n, the marked token
    itself is the only n-gram.
    """
    word = word.strip()
    if not word:
        raise EmptyToken("cannot extract n-grams from an empty token")
    marked = f"<{word}>"
    grams = [
        marked[i : i + n]
        for n in range(config.n_min, config.n_max + 1)
        for i in range(len(marked) - n + 1)
    ]
    return grams or [marked]


class NgramTable:
    """``buckets x dim`` matrix of n-gram vectors.

    Rows are generated lazily from the seed unless an explicit matrix is
    supplied (``from_vectors``), which tests use for hand-checkable fixtures.
    """

    def __init__(self, config: NgramVocabConfig, vectors: np.ndarray | None = None):
        self.config = config
        if vectors is not None:
            vectors = np.asarray(vectors, dtype=np.float64)
            if vectors.shape != (config.buckets, config.dim):
                raise DimensionMismatch(f"table must be {(config.buckets, config.dim)}, got {vectors.shape}")
            if not np.all(np.isfinite(vectors)):
                raise ValueError("table entries must be finite")
            vectors = vectors.copy()
            vectors.setflags(write=False)
        self._vectors = vectors
        self._token_cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_vectors(cls, vectors, **config_kw) -> "NgramTable":
        vectors = np.asarray(vectors, dtype=np.float64)
        config = NgramVocabConfig(buckets=vectors.shape[0], dim=vectors.shape[1], **config_kw)
        return cls(config, vectors)

    @property
    def dim(self) -> int:
        return self.config.dim

    def bucket(self, gram: str) -> int:
        return fnv1a_64(gram.encode("utf-8")) % self.config.buckets

    def rows(self, indices: Sequence[int]) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.uint64)
        if self._vectors is not None:
            return self._vectors[idx.astype(np.int64)]
        n = self.config.dim
        counters = (idx[:, None] * np.uint64(n) + np.arange(n, dtype=np.uint64)[None, :])
        with np.errstate(over="ignore"):
            bits = _splitmix64(counters ^ _splitmix64(np.full(1, self.config.seed, dtype=np.uint64)))
        unit = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (2.0 * unit - 1.0) / n

    @property
    def vectors(self) -> np.ndarray:
        if self._vectors is None:
            if self.config.buckets * self.config.dim > 2**25:
                raise MemoryError("refusing to materialize a table this large; use rows()")
            return self.rows(np.arange(self.config.buckets))
        return self._vectors

    def embed_token(self, word: str) -> np.ndarray:
        cached = self._token_cache.get(word)
        if cached is not None:
            return cached
        grams = extract_ngrams(word, self.config)
        vec = self.rows([self.bucket(g) for g in grams]).sum(axis=0)
        vec.setflags(write=False)
        with self._lock:
            if len(self._token_cache) > 500_000:
                self._token_cache.clear()
            self._token_cache[word] = vec
        return vec


def embed_token(word: str, table: NgramTable) -> np.ndarray:
    """Sum of the bucket vectors of the word's n-grams; shape (dim,)."""
    return table.embed_token(word).copy()


def ngram_score(word: str, context_vector, table: NgramTable) -> float:
    """Sum over the word's n-grams of ``z_g . v_c``."""
    ctx = np.asarray(context_vector, dtype=np.float64)
    if ctx.shape != (table.dim,):
        raise DimensionMismatch(f"context vector must have length {table.dim}, got shape {ctx.shape}")
    grams = extract_ngrams(word, table.config)
    total = 0.0
    for gram in grams:
        z = table.rows([table.bucket(gram)])[0]
        total += float(np.dot(z, ctx))
    return total


def tokenize_value(value: str) -> list[str]:
    return [tok for tok in TOKEN_SPLIT.split(value) if tok]


@dataclass(frozen=True)
class EmbeddedSample:
    matrix: np.ndarray
    label: str | None = None
    source_timestamp: int = 0


class FeatureEmbedder:
    """Turns field values into vectors: tokens are embedded and averaged per field.

    Values are cached, so repeated strings (the common case for Sysmon
    fields) cost one dictionary lookup.
    """

    def __init__(self, table: NgramTable, cache_size: int = 200_000):
        self.table = table
        self.cache_size = cache_size
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.table.dim

    def embed_value(self, value: str) -> np.ndarray:
        vec = self._cache.get(value)
        if vec is not None:
            return vec
        tokens = tokenize_value(value)
        if not tokens:
            tokens = [value.strip() or ABSENT]
        if len(tokens) == 1:
            vec = self.table.embed_token(tokens[0])
        else:
            vec = np.mean([self.table.embed_token(t) for t in tokens], axis=0)
            vec.setflags(write=False)
        with self._lock:
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            self._cache[value] = vec
        return vec

    def embed_events(self, events: Sequence[SysmonEvent], selected: Sequence[str]) -> np.ndarray:
        """Stack of per-event matrices, shape (n_events, len(selected), dim)."""
        if not selected:
            raise ValueError("selected feature list is empty")
        out = np.empty((len(events), len(selected), self.dim))
        for i, ev in enumerate(events):
            fields = ev.fields
            for j, name in enumerate(selected):
                try:
                    value = fields[name]
                except KeyError:
                    raise UnknownFeature(f"feature {name!r} not present on event") from None
                out[i, j] = self.embed_value(value)
        return out


def embed_event(event: SysmonEvent, selected: Sequence[str], table: NgramTable | FeatureEmbedder) -> EmbeddedSample:
    embedder = table if isinstance(table, FeatureEmbedder) else FeatureEmbedder(table)
    matrix = embedder.embed_events([event], selected)[0]
    return EmbeddedSample(matrix, event.label, event.timestamp)
