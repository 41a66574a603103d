"""Per-batch scaling, Pearson feature ranking and SMOTE oversampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, SingleClassBatch, TooFewMinority, TooFewRows

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- scaler


@dataclass
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: int = -1

    @property
    def constant(self) -> np.ndarray:
        return self.std == 0.0

    def __eq__(self, other):
        if not isinstance(other, ScalerParams):
            return NotImplemented
        return (
            self.fitted_on == other.fitted_on
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )


def fit_scaler(samples, fitted_on: int = -1) -> ScalerParams:
    """Column means and population standard deviations."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooFewRows(f"need at least 2 rows to fit a scaler, got shape {x.shape}")
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    # exact-constant columns can come out as tiny nonzero values from rounding in the mean
    std[np.all(x == x[0], axis=0)] = 0.0
    return ScalerParams(mean, std, fitted_on)


def apply_scaler(x, params: ScalerParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != params.mean.shape[0]:
        raise DimensionMismatch(f"expected {params.mean.shape[0]} columns, got {x.shape[-1]}")
    const = params.constant
    safe_std = np.where(const, 1.0, params.std)
    out = (x - params.mean) / safe_std
    out[..., const] = 0.0
    return out[0] if squeeze else out


# --------------------------------------------------------------------------- pcc


def pcc(x, y, *, return_flag: bool = False):
    """Pearson correlation; a zero-variance argument yields 0 with the degenerate flag set."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionMismatch(f"pcc needs equal-length vectors, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise TooFewRows("pcc needs at least 2 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return (0.0, True) if return_flag else 0.0
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))
    return (r, False) if return_flag else r


def pcc_columns(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """PCC of every column of ``x`` against ``y``; degenerate columns give 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean(axis=0)
    dy = y - y.mean()
    sxx = np.einsum("ij,ij->j", dx, dx)
    syy = float(np.dot(dy, dy))
    num = dx.T @ dy
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / np.sqrt(sxx * syy)
    r[(sxx == 0.0) | (syy == 0.0)] = 0.0
    return np.clip(r, -1.0, 1.0)


def pcc_matrix(x: np.ndarray) -> np.ndarray:
    """Feature-by-feature PCC (the heatmap); degenerate pairs give 0, diagonal 1 where defined."""
    x = np.asarray(x, dtype=np.float64)
    dx = x - x.mean(axis=0)
    ss = np.einsum("ij,ij->j", dx, dx)
    cov = dx.T @ dx
    denom = np.sqrt(np.outer(ss, ss))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = cov / denom
    r[denom == 0.0] = 0.0
    return np.clip(r, -1.0, 1.0)


# --------------------------------------------------------------------------- ranking


@dataclass
class FeatureRanking:
    scores: dict[str, float]
    selected: list[str]
    k: int = 6
    mode: str = "absolute"
    heatmap: np.ndarray | None = field(default=None, repr=False)
    feature_names: list[str] = field(default_factory=list)

    def to_dict(self, include_heatmap: bool = False) -> dict:
        doc = {"k": self.k, "mode": self.mode, "selected": list(self.selected), "scores": dict(self.scores)}
        if include_heatmap and self.heatmap is not None:
            doc["heatmap"] = {"features": list(self.feature_names), "matrix": self.heatmap.tolist()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureRanking":
        heat = doc.get("heatmap")
        return cls(
            scores={k: float(v) for k, v in doc["scores"].items()},
            selected=list(doc["selected"]),
            k=int(doc["k"]),
            mode=doc.get("mode", "absolute"),
            heatmap=np.asarray(heat["matrix"]) if heat else None,
            feature_names=list(heat["features"]) if heat else list(doc["scores"]),
        )


REDUCTIONS = ("mean", "maxabs", "contrast")


def reduce_embeddings(embedded: np.ndarray, reduction: str = "mean", labels=None) -> np.ndarray:
    """(n, F, N) embeddings -> (n, F) scalars, one per feature per event.

    ``contrast`` projects each feature's vectors onto the unit direction
    between the two class means, so it needs ``labels``. The other
    reductions ignore them.
    """
    embedded = np.asarray(embedded, dtype=np.float64)
    if reduction == "mean":
        return embedded.mean(axis=-1)
    if reduction == "maxabs":
        idx = np.abs(embedded).argmax(axis=-1)
        return np.take_along_axis(embedded, idx[..., None], axis=-1)[..., 0]
    if reduction == "contrast":
        if labels is None:
            raise ValueError("contrast reduction needs labels")
        y = np.asarray(labels).astype(bool)
        if y.all() or not y.any():
            raise SingleClassBatch("contrast reduction needs both classes")
        d = embedded[y].mean(axis=0) - embedded[~y].mean(axis=0)
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        d = np.divide(d, norm, out=np.zeros_like(d), where=norm > 0)
        return np.einsum("ifn,fn->if", embedded, d)
    raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


def event_scalars(events, feature_names: Sequence[str], embed_value, reduction: str = "mean", labels=None) -> np.ndarray:
    """Per-event feature scalars computed from distinct values only.

    Same result as ``reduce_embeddings`` over the full embedded stack, but each
    distinct field value is embedded once, which keeps whole-schema ranking
    cheap on large windows.
    """
    n = len(events)
    out = np.empty((n, len(feature_names)))
    y = None
    if reduction == "contrast":
        if labels is None:
            raise ValueError("contrast reduction needs labels")
        y = np.asarray(labels).astype(bool)
        if y.all() or not y.any():
            raise SingleClassBatch("contrast reduction needs both classes")
    for j, name in enumerate(feature_names):
        codes: dict[str, int] = {}
        ids = np.fromiter((codes.setdefault(ev.fields[name], len(codes)) for ev in events), dtype=np.int64, count=n)
        vecs = np.array([embed_value(v) for v in codes], dtype=np.float64)
        if reduction == "contrast":
            pos = np.bincount(ids[y], minlength=len(codes)) / y.sum()
            neg = np.bincount(ids[~y], minlength=len(codes)) / (~y).sum()
            d = (pos - neg) @ vecs
            norm = np.linalg.norm(d)
            values = vecs @ (d / norm) if norm > 0 else np.zeros(len(codes))
        else:
            values = reduce_embeddings(vecs[:, None, :], reduction)[:, 0]
        out[:, j] = values[ids]
    return out


def select_features(
    scalars,
    labels,
    feature_names: Sequence[str],
    k: int = 6,
    mode: str = "absolute",
    with_heatmap: bool = True,
) -> FeatureRanking:
    """Rank features by PCC of their per-event scalar against the 0/1 label.

    ``scalars`` is (n_events, n_features) in schema order; ``labels`` holds 1
    for ransomware. Ties keep schema order.
    """
    x = np.asarray(scalars, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape[1] != len(feature_names):
        raise DimensionMismatch(f"{x.shape[1]} scalar columns for {len(feature_names)} feature names")
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch("scalars and labels differ in length")
    if np.unique(y).size < 2:
        raise SingleClassBatch("feature ranking needs both classes in the batch")
    if mode not in ("absolute", "signed"):
        raise ValueError(f"mode must be 'absolute' or 'signed', got {mode!r}")
    k = min(k, len(feature_names))
    r = pcc_columns(x, y)
    key = np.abs(r) if mode == "absolute" else r
    order = sorted(range(len(feature_names)), key=lambda j: (-key[j], j))
    return FeatureRanking(
        scores={name: float(r[j]) for j, name in enumerate(feature_names)},
        selected=[feature_names[j] for j in order[:k]],
        k=k,
        mode=mode,
        heatmap=pcc_matrix(x) if with_heatmap else None,
        feature_names=list(feature_names),
    )


# --------------------------------------------------------------------------- smote


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    target_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not (0.0 < self.target_ratio <= 1.0):
            raise ValueError("target_ratio must be in (0, 1]")


def nearest_neighbors(x: np.ndarray, k: int, chunk: int = 2048) -> np.ndarray:
    """Indices of the k nearest other rows (Euclidean), nearest first."""
    n = x.shape[0]
    sq = np.einsum("ij,ij->i", x, x)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (x[start:stop] @ x.T)
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k] if k < n - 1 else np.tile(np.arange(n), (stop - start, 1))
        for row in range(stop - start):
            cand = part[row]
            cand = cand[np.isfinite(d2[row, cand])]
            order = np.lexsort((cand, d2[row, cand]))
            out[start + row] = cand[order][:k]
    return out


def smote_count(minority_count: int, majority_count: int, target_ratio: float) -> int:
    return max(0, math.ceil(target_ratio * majority_count) - minority_count)


def smote(minority, majority_count: int, config: SmoteConfig = SmoteConfig(), rng=None, *, return_provenance=False):
    """Synthesize minority rows by interpolating toward nearest minority neighbours.

    Each synthetic row is ``x + u * (x_nn - x)`` with ``x`` drawn uniformly
    from the minority rows, ``x_nn`` one of its ``k`` nearest minority
    neighbours and ``u ~ U(0, 1)``. With ``return_provenance`` the base index,
    neighbour index and ``u`` of every row are returned too.
    """
    x = np.asarray(minority, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("minority must be a 2-D matrix")
    m = x.shape[0]
    n_new = smote_count(m, majority_count, config.target_ratio)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    empty_idx = np.zeros(0, dtype=np.int64)
    if n_new == 0:
        out = np.zeros((0, x.shape[1]))
        return (out, empty_idx, empty_idx, np.zeros(0)) if return_provenance else out
    if m == 0:
        raise TooFewMinority("no minority rows to oversample")
    if m == 1:
        log.warning("SMOTE with a single minority row: duplicating it")
        out = np.repeat(x, n_new, axis=0)
        zeros = np.zeros(n_new, dtype=np.int64)
        return (out, zeros, zeros, np.zeros(n_new)) if return_provenance else out

    k = min(config.k_neighbors, m - 1)
    nn = nearest_neighbors(x, k)
    base = rng.integers(0, m, size=n_new)
    pick = rng.integers(0, k, size=n_new)
    u = rng.random(n_new)
    partner = nn[base, pick]
    out = x[base] + u[:, None] * (x[partner] - x[base])
    if return_provenance:
        return out, base, partner, u
    return out


def oversample(x: np.ndarray, y: np.ndarray, config: SmoteConfig, rng=None):
    """Append SMOTE rows for the minority class of a binary (0/1) labeled matrix."""
    counts = np.bincount(y.astype(np.int64), minlength=2)
    if counts.min() == 0:
        return x, y
    minority = int(np.argmin(counts))
    synth = smote(x[y == minority], int(counts.max()), config, rng)
    if synth.shape[0] == 0:
        return x, y
    return np.vstack([x, synth]), np.concatenate([y, np.full(synth.shape[0], minority, dtype=y.dtype)])
