"""Batch-incremental training loop over a windowed event stream.

Events are appended to an open window; once it reaches its configured size
(``initial_window`` for the first, ``update_window`` afterwards) the window is
split 80:20, preprocessed on the train part only, used to build or fine-tune
the model, and evaluated on the held-out part.
"""

from __future__ import annotations

import copy
import logging
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .embedding import FeatureEmbedder, NgramTable, NgramVocabConfig
from .errors import (
    EmptyHistory,
    FeatureSetChanged,
    InvalidConfig,
    NonFiniteLoss,
    SingleClassBatch,
    TrainingDiverged,
    UnlabeledStream,
)
from .events import RANSOMWARE, EventSchema, SysmonEvent, default_schema
from .metrics import MetricsRecord, MetricsWriter, confusion, read_metrics_csv
from .neural.model import GROUPS, Model, ModelArch, predict_labels, set_frozen
from .neural.optim import OptimizerState, fit
from .preprocessing import (
    REDUCTIONS,
    FeatureRanking,
    ScalerParams,
    SmoteConfig,
    apply_scaler,
    event_scalars,
    fit_scaler,
    oversample,
    select_features,
)

log = logging.getLogger(__name__)

# third component of every per-window RNG seed
_PURPOSES = {"split": 1, "smote": 2, "init": 3, "train": 4, "retrain": 5, "retrain_smote": 6}


def window_rng(seed: int, window_id: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng([seed, window_id, _PURPOSES[purpose]])


def parse_groups(spec) -> tuple[str, ...]:
    """``"conv,lstm"``, ``"all"``, ``"none"`` or an iterable of group names."""
    if isinstance(spec, str):
        spec = spec.strip().lower()
        if spec in ("", "none"):
            return ()
        if spec == "all":
            return GROUPS
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    groups = tuple(dict.fromkeys(spec))
    unknown = set(groups).difference(GROUPS)
    if unknown:
        raise InvalidConfig(f"unknown parameter group(s) {sorted(unknown)}; expected {GROUPS}")
    return groups


@dataclass(frozen=True)
class EngineConfig:
    initial_window: int = 40_000
    update_window: int = 10_000
    train_fraction: float = 0.8
    sgd_batch: int = 1024
    freeze_groups: tuple[str, ...] = ("conv",)
    # 0 disables re-ranking after the first window
    reselect_features_every: int = 1
    history_buffer: int = 40_000
    split: str = "shuffle"
    k_features: int = 6
    reduction: str = "contrast"
    ranking_mode: str = "absolute"
    initial_epochs: int = 100
    update_epochs: int = 100
    retrain_epochs: int = 100
    patience: int = 5
    min_delta: float = 1e-5
    learning_rate: float = 1e-3
    smote_k: int = 5
    smote_ratio: float = 1.0
    threshold: float = 0.5
    dtype: str = "float64"
    branch_mode: str = "fused"
    flush_interval: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "freeze_groups", parse_groups(self.freeze_groups))
        self.validate()

    def validate(self) -> None:
        if not (0.0 < self.train_fraction < 1.0):
            raise InvalidConfig("train_fraction must lie strictly between 0 and 1")
        if self.initial_window < 2 or self.update_window < 2:
            raise InvalidConfig("windows need at least two events")
        if self.sgd_batch < 1 or self.sgd_batch > self.update_window * self.train_fraction:
            raise InvalidConfig("sgd_batch must be positive and no larger than update_window * train_fraction")
        if self.split not in ("shuffle", "chronological"):
            raise InvalidConfig("split must be 'shuffle' or 'chronological'")
        if self.reduction not in REDUCTIONS:
            raise InvalidConfig(f"reduction must be one of {REDUCTIONS}")
        if self.ranking_mode not in ("absolute", "signed"):
            raise InvalidConfig("ranking_mode must be 'absolute' or 'signed'")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")
        if self.reselect_features_every < 0 or self.history_buffer < 0 or self.k_features < 1:
            raise InvalidConfig("reselect_features_every and history_buffer must be >= 0, k_features >= 1")
        if min(self.initial_epochs, self.update_epochs, self.retrain_epochs) < 0:
            raise InvalidConfig("epoch counts must be >= 0")
        if not (0.0 < self.threshold < 1.0):
            raise InvalidConfig("threshold must lie strictly between 0 and 1")
        if self.flush_interval is not None and self.flush_interval <= 0:
            raise InvalidConfig("flush_interval must be positive when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_groups"] = list(self.freeze_groups)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc).difference(known)
        if unknown:
            raise InvalidConfig(f"unknown engine option(s): {sorted(unknown)}")
        return cls(**doc)

    def with_(self, **kw) -> "EngineConfig":
        return replace(self, **kw)


def split_indices(n: int, window_id: int, seed: int, train_fraction: float = 0.8, mode: str = "shuffle"):
    """Sorted, disjoint train/test index arrays covering ``range(n)``."""
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1) if n >= 2 else n
    if mode == "chronological":
        order = np.arange(n)
    else:
        order = window_rng(seed, window_id, "split").permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


@dataclass
class WindowReady:
    window_id: int
    events: list[SysmonEvent]
    # stream position of the window's first event
    start: int = 0


@dataclass
class MiniBatch:
    events: list[SysmonEvent]
    window_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    ranking: FeatureRanking | None = None
    scaler: ScalerParams | None = None

    @classmethod
    def from_ready(cls, ready: WindowReady, seed: int, config: EngineConfig) -> "MiniBatch":
        tr, te = split_indices(len(ready.events), ready.window_id, seed, config.train_fraction, config.split)
        return cls(ready.events, ready.window_id, tr, te)

    @property
    def train_events(self) -> list[SysmonEvent]:
        return [self.events[i] for i in self.train_idx]

    @property
    def test_events(self) -> list[SysmonEvent]:
        return [self.events[i] for i in self.test_idx]


@dataclass(frozen=True)
class Snapshot:
    """Immutable view of the latest trained state, safe to use from inference threads."""

    model: Model
    scaler: ScalerParams
    features: tuple[str, ...]
    window_id: int


@dataclass
class WindowOutcome:
    record: MetricsRecord
    retrained: bool = False
    diverged: bool = False
    ranked: bool = False


def _labels(events: Sequence[SysmonEvent]) -> np.ndarray:
    if any(ev.label is None for ev in events):
        raise UnlabeledStream("training and evaluation need labeled events")
    return np.fromiter((ev.label == RANSOMWARE for ev in events), dtype=np.int64, count=len(events))


class IncrementalEngine:
    """Single-writer owner of the model; feed it events with ``ingest`` or ``run``."""

    def __init__(
        self,
        config: EngineConfig = EngineConfig(),
        arch: ModelArch = ModelArch(),
        *,
        seed: int = 0,
        schema: EventSchema | None = None,
        ngram: NgramVocabConfig = NgramVocabConfig(),
        checkpoint_path: str | Path | None = None,
        metrics_path: str | Path | None = None,
        save_checkpoints: bool = True,
        hooks: dict[str, Callable] | None = None,
    ):
        self.config = config
        self.arch = arch
        self.seed = int(seed)
        self.schema = schema or default_schema()
        self.ngram = ngram
        self.embedder = FeatureEmbedder(NgramTable(ngram))
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.metrics_writer = MetricsWriter(metrics_path) if metrics_path else None
        self.save_checkpoints = save_checkpoints
        self.hooks = dict(hooks or {})

        self.model: Model | None = None
        self.optimizer: OptimizerState | None = None
        self.scaler: ScalerParams | None = None
        self.ranking: FeatureRanking | None = None
        self.features: tuple[str, ...] = ()

        self.next_window_id = 0
        self.events_consumed = 0  # events belonging to completed windows
        self._open: list[SysmonEvent] = []
        self._open_since: float | None = None
        self.history: deque[SysmonEvent] = deque(maxlen=config.history_buffer or None)
        self.records: list[MetricsRecord] = []
        self.retrain_count = 0
        self.failures: list[dict] = []
        self.windows_processed = 0
        self._skip = 0
        self._replay_buf: list[SysmonEvent] = []
        self._replay_wid = 0
        self._lock = threading.Lock()
        self._snapshot: Snapshot | None = None

    # ------------------------------------------------------------------ windowing

    def window_size(self, window_id: int) -> int:
        return self.config.initial_window if window_id == 0 else self.config.update_window

    @property
    def open_window(self) -> list[SysmonEvent]:
        return list(self._open)

    def ingest(self, event: SysmonEvent) -> WindowReady | None:
        """Append one event; returns the window once it is full."""
        if not isinstance(event, SysmonEvent):
            raise TypeError("ingest expects a parsed SysmonEvent")
        if not self._open:
            self._open_since = time.monotonic()
        self._open.append(event)
        if len(self._open) >= self.window_size(self.next_window_id):
            return self._close_window()
        return None

    def flush_due(self) -> bool:
        interval = self.config.flush_interval
        return bool(interval and self._open and time.monotonic() - self._open_since >= interval)

    def flush(self) -> WindowReady | None:
        """Close the open window early (wall-clock flush); None when it is too small to split."""
        if len(self._open) < 2:
            return None
        return self._close_window()

    def _close_window(self) -> WindowReady:
        ready = WindowReady(self.next_window_id, self._open, self.events_consumed)
        self._open = []
        self._open_since = None
        self.next_window_id += 1
        return ready

    # ------------------------------------------------------------------ preprocessing

    def _rank(self, events, y) -> FeatureRanking:
        names = self.schema.feature_names
        scalars = event_scalars(events, names, self.embedder.embed_value, self.config.reduction, y)
        return select_features(scalars, y, names, self.config.k_features, self.config.ranking_mode)

    def _canonical(self, selected) -> tuple[str, ...]:
        # model input layout follows schema order so an unchanged set means an unchanged layout
        index = self.schema.index
        return tuple(sorted(selected, key=index.__getitem__))

    def _embed(self, events, features) -> np.ndarray:
        e = self.embedder.embed_events(events, features)
        return e.reshape(e.shape[0], -1)

    def _prepare(self, events, y, features, rng, fitted_on):
        flat = self._embed(events, features)
        scaler = fit_scaler(flat, fitted_on=fitted_on)
        x = apply_scaler(flat, scaler)
        cfg = self.config
        x, y = oversample(x, y, SmoteConfig(cfg.smote_k, cfg.smote_ratio), rng)
        return x.reshape(x.shape[0], len(features), -1), y, scaler

    # ------------------------------------------------------------------ training

    def _fresh_model(self, features, window_id, purpose) -> tuple[Model, OptimizerState]:
        model = Model.build(
            self.arch,
            (len(features), self.ngram.dim),
            seed=int(window_rng(self.seed, window_id, purpose).integers(2**63)),
            dtype=np.dtype(self.config.dtype).type,
            branch_mode=self.config.branch_mode,
        )
        return model, OptimizerState.for_model(model, learning_rate=self.config.learning_rate)

    def _fit(self, model, opt, x, y, epochs, rng) -> None:
        cfg = self.config
        fit(model, x, y, opt, rng, epochs=epochs, batch_size=cfg.sgd_batch, min_delta=cfg.min_delta, patience=cfg.patience)
        model.snap_to_float32()

    def retrain_from_history(self, features: Sequence[str] | None = None, window_id: int | None = None) -> ModelCheckpoint:
        """Fresh model on the retained history buffer under ``features``; replaces the current state."""
        if not self.history:
            raise EmptyHistory("no retained events to retrain from")
        features = self._canonical(features or self.features)
        wid = self.next_window_id - 1 if window_id is None else window_id
        events = list(self.history)
        y = _labels(events)
        if np.unique(y).size < 2:
            raise SingleClassBatch("history holds a single class")
        x, y2, scaler = self._prepare(events, y, features, window_rng(self.seed, wid, "retrain_smote"), wid)
        model, opt = self._fresh_model(features, wid, "retrain")
        try:
            self._fit(model, opt, x, y2, self.config.retrain_epochs, window_rng(self.seed, wid, "retrain"))
        except NonFiniteLoss as exc:
            raise TrainingDiverged(str(exc)) from exc
        self.model, self.optimizer, self.scaler, self.features = model, opt, scaler, features
        self.retrain_count += 1
        log.info("retrained from %d history events on features %s", len(events), list(features))
        return self.checkpoint()

    def check_feature_set(self, ranking: FeatureRanking) -> None:
        new = self._canonical(ranking.selected)
        if self.model is not None and new != self.features:
            raise FeatureSetChanged(self.features, new)

    def process_window(self, ready: WindowReady) -> MetricsRecord:
        return self._process(ready).record

    def _process(self, ready: WindowReady) -> WindowOutcome:
        t0 = time.monotonic()
        cfg = self.config
        wid = ready.window_id
        batch = MiniBatch.from_ready(ready, self.seed, cfg)
        train_ev = batch.train_events
        test_ev = batch.test_events
        y_tr = _labels(train_ev)
        y_te = _labels(test_ev)
        outcome = WindowOutcome(record=None)  # type: ignore[arg-type]

        ranking = self.ranking
        every = cfg.reselect_features_every
        if ranking is None or (every and wid % every == 0):
            try:
                ranking = self._rank(train_ev, y_tr)
                outcome.ranked = True
            except SingleClassBatch:
                if ranking is None:
                    raise
                log.warning("window %d: single-class train split, keeping previous ranking", wid)
        batch.ranking = ranking

        self.history.extend(train_ev)
        saved = (self.model, self.optimizer, self.scaler, self.features, self.ranking, self.retrain_count)
        try:
            if self.model is None:
                features = self._canonical(ranking.selected)
                x, y, scaler = self._prepare(train_ev, y_tr, features, window_rng(self.seed, wid, "smote"), wid)
                model, opt = self._fresh_model(features, wid, "init")
                self._fit(model, opt, x, y, cfg.initial_epochs, window_rng(self.seed, wid, "train"))
                self.model, self.optimizer, self.scaler, self.features = model, opt, scaler, features
            else:
                try:
                    self.check_feature_set(ranking)
                except FeatureSetChanged as exc:
                    log.info("window %d: feature set changed %s -> %s", wid, list(exc.old), list(exc.new))
                    self.retrain_from_history(exc.new, wid)
                    outcome.retrained = True
                else:
                    x, y, scaler = self._prepare(train_ev, y_tr, self.features, window_rng(self.seed, wid, "smote"), wid)
                    model = self.model.copy()
                    opt = copy.deepcopy(self.optimizer)
                    set_frozen(model, cfg.freeze_groups)
                    self._fit(model, opt, x, y, cfg.update_epochs, window_rng(self.seed, wid, "train"))
                    self.model, self.optimizer, self.scaler = model, opt, scaler
            self.ranking = ranking
        except (NonFiniteLoss, TrainingDiverged) as exc:
            self.model, self.optimizer, self.scaler, self.features, self.ranking, self.retrain_count = saved
            self.failures.append({"window_id": wid, "error": str(exc)})
            outcome.diverged = True
            log.error("window %d: training diverged (%s); previous model kept", wid, exc)
            if self.model is None:
                raise TrainingDiverged(f"window {wid}: {exc}") from exc
        batch.scaler = self.scaler

        probs = self.predict_proba_events(test_ev, self.model, self.scaler, self.features)
        counts = confusion(y_te, predict_labels(probs, cfg.threshold))
        record = MetricsRecord.from_counts(wid, counts, time.monotonic() - t0, int(time.time() * 1000))
        outcome.record = record

        self.events_consumed = ready.start + len(ready.events)
        self.windows_processed += 1
        if self.checkpoint_path is not None and self.save_checkpoints and not outcome.diverged:
            save_checkpoint(self.checkpoint(pending=record), self.checkpoint_path)
        self._call_hook("after_checkpoint", wid)
        if self.metrics_writer is not None:
            self.metrics_writer.append(record)
        self.records.append(record)
        self._publish(wid)
        return outcome

    def _call_hook(self, name, *args):
        hook = self.hooks.get(name)
        if hook is not None:
            hook(*args)

    # ------------------------------------------------------------------ inference

    def predict_proba_events(self, events, model=None, scaler=None, features=None) -> np.ndarray:
        model = model or self.model
        if model is None:
            raise RuntimeError("no model has been trained or loaded")
        features = features or self.features
        x = apply_scaler(self._embed(events, features), scaler or self.scaler)
        return model.predict_proba(x.reshape(len(events), len(features), -1))[:, 1]

    def _publish(self, window_id: int) -> None:
        snap = Snapshot(self.model.copy(), self.scaler, self.features, window_id)
        with self._lock:
            self._snapshot = snap

    @property
    def snapshot(self) -> Snapshot | None:
        with self._lock:
            return self._snapshot

    def infer(self, events: Sequence[SysmonEvent]) -> np.ndarray:
        """P(ransomware) from the last published snapshot; may run while a window trains."""
        snap = self.snapshot
        if snap is None:
            raise RuntimeError("no snapshot published yet")
        return self.predict_proba_events(events, snap.model, snap.scaler, snap.features)

    # ------------------------------------------------------------------ persistence

    def checkpoint(self, pending: MetricsRecord | None = None) -> ModelCheckpoint:
        meta = {
            "features": list(self.features),
            "next_window_id": self.next_window_id,
            "events_consumed": self.events_consumed,
            "retrain_count": self.retrain_count,
            "dtype": self.config.dtype,
            "pending": pending.to_dict() if pending is not None else None,
        }
        return ModelCheckpoint.from_model(
            self.model, self.optimizer, self.ngram, self.scaler, self.ranking, self.next_window_id - 1, self.seed, meta
        )

    def load_state(self, ckpt: ModelCheckpoint, *, resume: bool = False) -> None:
        """Adopt a checkpoint's model. With ``resume`` the stream position is restored as well."""
        if ckpt.ngram != self.ngram:
            self.ngram = ckpt.ngram
            self.embedder = FeatureEmbedder(NgramTable(ckpt.ngram))
        self.arch = ckpt.arch
        self.model = ckpt.to_model(dtype=np.dtype(self.config.dtype).type, branch_mode=self.config.branch_mode)
        self.optimizer = ckpt.optimizer
        self.scaler = ckpt.scaler
        self.ranking = ckpt.ranking
        self.features = tuple(ckpt.meta.get("features") or self._canonical(ckpt.ranking.selected))
        if resume:
            self.seed = ckpt.seed
            self.next_window_id = int(ckpt.meta["next_window_id"])
            self.events_consumed = int(ckpt.meta["events_consumed"])
            self.retrain_count = int(ckpt.meta.get("retrain_count", 0))
            self._skip = self.events_consumed
        self._publish(ckpt.window_id)

    @classmethod
    def resume(cls, checkpoint_path: str | Path, config: EngineConfig, metrics_path: str | Path | None = None, **kw) -> "IncrementalEngine":
        """Restart from the last durable checkpoint.

        A metrics row the crashed run computed but never wrote is recovered from
        the checkpoint. The caller replays the stream from its start; the first
        ``events_consumed`` events only refill the history buffer.
        """
        ckpt = load_checkpoint(checkpoint_path)
        engine = cls(config, ckpt.arch, seed=ckpt.seed, ngram=ckpt.ngram, checkpoint_path=checkpoint_path, metrics_path=metrics_path, **kw)
        engine.load_state(ckpt, resume=True)
        pending = ckpt.meta.get("pending")
        if pending is not None and metrics_path is not None:
            written = {row["window_id"] for row in read_metrics_csv(metrics_path)}
            if pending["window_id"] not in written:
                engine.metrics_writer.append(MetricsRecord.from_dict(pending))
                log.info("recovered metrics row for window %d from checkpoint", pending["window_id"])
        return engine

    def _replay(self, event: SysmonEvent) -> None:
        """Re-window an already consumed event so the history buffer matches the original run."""
        self._replay_buf.append(event)
        wid = self._replay_wid
        if len(self._replay_buf) >= self.window_size(wid):
            tr, _ = split_indices(len(self._replay_buf), wid, self.seed, self.config.train_fraction, self.config.split)
            self.history.extend(self._replay_buf[i] for i in tr)
            self._replay_buf = []
            self._replay_wid += 1

    # ------------------------------------------------------------------ driver

    def feed(self, event: SysmonEvent) -> WindowOutcome | None:
        """Ingest one event and process the window it completes, if any."""
        if self._skip:
            self._replay(event)
            self._skip -= 1
            return None
        ready = self.ingest(event)
        if ready is None and self.flush_due():
            ready = self.flush()
        return self._process(ready) if ready is not None else None

    def poll(self) -> WindowOutcome | None:
        """Process the open window if its flush interval has elapsed; for idle streams."""
        if self._skip or not self.flush_due():
            return None
        ready = self.flush()
        return self._process(ready) if ready is not None else None

    def run(self, events: Iterable[SysmonEvent]) -> list[MetricsRecord]:
        out = []
        for ev in events:
            outcome = self.feed(ev)
            if outcome is not None:
                out.append(outcome.record)
        return out


__all__ = [
    "EngineConfig", "IncrementalEngine", "MiniBatch", "Snapshot", "WindowOutcome", "WindowReady",
    "parse_groups", "split_indices", "window_rng",
]
