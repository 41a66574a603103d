"""Stream drivers behind the command line: file/TCP ingestion, runs, comparisons, threshold sweeps."""

from __future__ import annotations

import csv
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .engine import EngineConfig, IncrementalEngine
from .errors import EventError, InputUnavailable, InvalidConfig, UnlabeledStream
from .events import EventSchema, SysmonEvent, default_schema, parse_event
from .metrics import (
    MetricsRecord,
    MetricsWriter,
    comparison_report,
    confusion,
    f_beta,
    rates,
    summarize,
    write_f2_series,
    write_json,
)
from .neural.model import ModelArch, predict_labels

log = logging.getLogger(__name__)

MODES = ("train-stream", "infer-stream", "generate", "compare", "sweep-threshold")
PARSE_POLICIES = ("skip", "fail")
SWEEP_THRESHOLDS = np.round(np.arange(1, 100) / 100, 2)


@dataclass
class RunConfig:
    mode: str = "train-stream"
    input: str | None = None
    out_dir: Path = Path("out")
    seed: int = 0
    schema: EventSchema = field(default_factory=default_schema)
    engine: EngineConfig = field(default_factory=EngineConfig)
    arch: ModelArch = field(default_factory=ModelArch)
    checkpoint: Path | None = None
    resume: bool = False
    on_parse_error: str = "skip"
    queue_size: int = 4096
    max_clients: int | None = None
    variants: tuple[ModelArch, ...] = ()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}")
        if self.on_parse_error not in PARSE_POLICIES:
            raise InvalidConfig(f"on_parse_error must be one of {PARSE_POLICIES}")
        if self.queue_size < 1:
            raise InvalidConfig("queue_size must be positive")
        self.engine.validate()
        self.out_dir = Path(self.out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise InvalidConfig(f"out_dir {self.out_dir} is not writable: {exc}") from None


# ---------------------------------------------------------------------- input sources


def parse_input(spec: str) -> tuple[str, object]:
    """``tcp:host:port`` or a file path."""
    if spec.startswith("tcp:"):
        host, _, port = spec[4:].rpartition(":")
        try:
            return "tcp", (host or "127.0.0.1", int(port))
        except ValueError:
            raise InputUnavailable(f"bad TCP address {spec!r}") from None
    return "file", Path(spec)


def file_lines(path: Path) -> Iterator[bytes]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise InputUnavailable(f"cannot open {path}: {exc}") from None
    with fh:
        yield from fh


class TcpLineServer:
    """Newline-delimited JSONL over plain TCP, one client at a time.

    The engine's open window lives outside this class, so a client that
    disconnects mid-window loses nothing: the next client continues filling the
    same window. A trailing line without LF at disconnect is dropped.
    """

    def __init__(self, host: str, port: int, *, max_clients: int | None = None, stop: threading.Event | None = None):
        self.max_clients = max_clients
        self.stop = stop or threading.Event()
        self.dropped_partial = 0
        self.clients = 0
        try:
            self.sock = socket.create_server((host, port))
        except OSError as exc:
            raise InputUnavailable(f"cannot listen on {host}:{port}: {exc}") from None
        self.sock.settimeout(0.2)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def lines(self) -> Iterator[bytes]:
        try:
            while not self.stop.is_set():
                if self.max_clients is not None and self.clients >= self.max_clients:
                    return
                try:
                    conn, peer = self.sock.accept()
                except socket.timeout:
                    continue
                self.clients += 1
                log.info("client %s connected", peer)
                yield from self._serve(conn)
                log.info("client %s disconnected", peer)
        finally:
            self.sock.close()

    def _serve(self, conn: socket.socket) -> Iterator[bytes]:
        conn.settimeout(0.2)
        buf = b""
        with conn:
            while not self.stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not chunk:
                    break
                buf += chunk
                *complete, buf = buf.split(b"\n")
                yield from complete
        if buf.strip():
            self.dropped_partial += 1
            log.warning("dropped %d bytes of an unterminated line at disconnect", len(buf))


_DONE = object()


@dataclass
class ReaderStats:
    lines: int = 0
    events: int = 0
    parse_errors: int = 0


class EventReader:
    """Producer thread: parses lines into events and hands them over a bounded queue.

    ``put`` blocks when the queue is full, so a fast producer cannot outrun
    the engine's memory.
    """

    def __init__(self, lines: Iterable[bytes], schema: EventSchema, *, maxsize: int = 4096, on_parse_error: str = "skip"):
        self.queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self.stats = ReaderStats()
        self._lines = lines
        self._schema = schema
        self._policy = on_parse_error
        self._halt = threading.Event()
        self.thread = threading.Thread(target=self._run, name="event-reader", daemon=True)

    def start(self) -> "EventReader":
        self.thread.start()
        return self

    def close(self) -> None:
        self._halt.set()

    def _put(self, item) -> bool:
        while not self._halt.is_set():
            try:
                self.queue.put(item, timeout=0.2)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for line in self._lines:
                if self._halt.is_set():
                    break
                if not line.strip():
                    continue
                self.stats.lines += 1
                try:
                    event = parse_event(line, self._schema)
                except EventError as exc:
                    self.stats.parse_errors += 1
                    if self._policy == "fail":
                        raise type(exc)(f"line {self.stats.lines}: {exc}") from None
                    log.warning("line %d skipped: %s", self.stats.lines, exc)
                    continue
                self.stats.events += 1
                if not self._put(event):
                    break
        except BaseException as exc:  # handed to the consumer
            self._put(exc)
        self._put(_DONE)

    def __iter__(self) -> Iterator[SysmonEvent | None]:
        """Events in order; yields None on idle ticks so the consumer can poll flushes."""
        while True:
            try:
                item = self.queue.get(timeout=0.2)
            except queue.Empty:
                yield None
                continue
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item


def open_lines(spec: str, *, max_clients: int | None = None, stop: threading.Event | None = None, on_listen=None):
    """Line iterator for a source spec; ``on_listen(address)`` fires once a TCP socket is bound."""
    kind, target = parse_input(spec)
    if kind == "file":
        if not target.is_file():
            raise InputUnavailable(f"input file {target} does not exist")
        return file_lines(target), None
    server = TcpLineServer(*target, max_clients=max_clients, stop=stop)
    log.info("listening on %s:%d", *server.address)
    if on_listen is not None:
        on_listen(server.address)
    return server.lines(), server


def load_stream(spec: str, schema: EventSchema, on_parse_error: str = "skip") -> tuple[list[SysmonEvent], ReaderStats]:
    """Read a whole file source into memory (comparisons replay it once per variant)."""
    lines, _ = open_lines(spec)
    reader = EventReader(lines, schema, on_parse_error=on_parse_error).start()
    events = [ev for ev in reader if ev is not None]
    return events, reader.stats


# ---------------------------------------------------------------------- runs


@dataclass
class StreamResult:
    records: list[MetricsRecord]
    summary: dict


def _drive(engine: IncrementalEngine, events: Iterable[SysmonEvent | None]) -> int:
    """Feed events (None = idle tick); returns how many windows completed."""
    done = 0
    for ev in events:
        outcome = engine.poll() if ev is None else engine.feed(ev)
        if outcome is not None:
            done += 1
    return done


def _stream_summary(cfg: RunConfig, engine: IncrementalEngine, stats: ReaderStats | None, wall: float, server=None) -> dict:
    doc = {
        "mode": cfg.mode,
        "seed": engine.seed,
        "input": cfg.input,
        "engine": engine.config.to_dict(),
        "arch": engine.arch.to_dict(),
        "windows": len(engine.records),
        "retrain_count": engine.retrain_count,
        "failures": engine.failures,
        "features": list(engine.features),
        "pending_events": len(engine.open_window),
        "wall_s": wall,
        "metrics": summarize(engine.records),
        "metrics_after_baseline": summarize(engine.records, skip_baseline=True),
    }
    if stats is not None:
        doc["reader"] = {"lines": stats.lines, "events": stats.events, "parse_errors": stats.parse_errors}
    if server is not None:
        doc["tcp"] = {"clients": server.clients, "dropped_partial_lines": server.dropped_partial}
    return doc


def run_stream(cfg: RunConfig, *, stop: threading.Event | None = None, hooks=None, on_listen=None) -> StreamResult:
    """train-stream: ingest, train per window, checkpoint, report."""
    cfg.validate()
    out = cfg.out_dir
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    metrics_path = out / "metrics.csv"
    if cfg.resume and ckpt_path.exists():
        engine = IncrementalEngine.resume(ckpt_path, cfg.engine, metrics_path, schema=cfg.schema, hooks=hooks)
        log.info("resumed at window %d after %d events", engine.next_window_id, engine.events_consumed)
    else:
        metrics_path.unlink(missing_ok=True)
        engine = IncrementalEngine(
            cfg.engine, cfg.arch, seed=cfg.seed, schema=cfg.schema,
            checkpoint_path=ckpt_path, metrics_path=metrics_path, hooks=hooks,
        )
    lines, server = open_lines(cfg.input, max_clients=cfg.max_clients, stop=stop, on_listen=on_listen)
    reader = EventReader(lines, cfg.schema, maxsize=cfg.queue_size, on_parse_error=cfg.on_parse_error).start()
    t0 = time.monotonic()
    try:
        _drive(engine, reader)
    finally:
        reader.close()
    wall = time.monotonic() - t0
    write_f2_series(engine.records, out / "f2_series.csv")
    summary = _stream_summary(cfg, engine, reader.stats, wall, server)
    write_json(summary, out / "summary.json")
    return StreamResult(engine.records, summary)


def run_infer(cfg: RunConfig, *, stop: threading.Event | None = None, on_listen=None) -> StreamResult:
    """infer-stream: score windows with a fixed checkpoint. No training, the checkpoint is never written.

    Every event gets a prediction row. Windows whose events are all labeled
    also get a metrics row over the whole window.
    """
    cfg.validate()
    if cfg.checkpoint is None:
        raise InvalidConfig("infer-stream needs --checkpoint")
    ckpt = load_checkpoint(cfg.checkpoint)
    engine = IncrementalEngine(cfg.engine, ckpt.arch, seed=ckpt.seed, schema=cfg.schema, ngram=ckpt.ngram, save_checkpoints=False)
    engine.load_state(ckpt)
    out = cfg.out_dir
    metrics_path = out / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    writer = MetricsWriter(metrics_path)
    records: list[MetricsRecord] = []
    lines, server = open_lines(cfg.input, max_clients=cfg.max_clients, stop=stop, on_listen=on_listen)
    reader = EventReader(lines, cfg.schema, maxsize=cfg.queue_size, on_parse_error=cfg.on_parse_error).start()
    t0 = time.monotonic()
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        pred_out = csv.writer(fh, lineterminator="\n")
        pred_out.writerow(("window_id", "offset", "p_ransomware", "prediction", "label"))

        def score(ready):
            if ready is None:
                return
            w0 = time.monotonic()
            probs = engine.infer(ready.events)
            pred = predict_labels(probs, cfg.engine.threshold)
            for i, (ev, p, q) in enumerate(zip(ready.events, probs, pred)):
                pred_out.writerow((ready.window_id, i, repr(float(p)), int(q), ev.label or ""))
            if all(ev.label is not None for ev in ready.events):
                counts = confusion([ev.label for ev in ready.events], pred)
                rec = MetricsRecord.from_counts(ready.window_id, counts, time.monotonic() - w0, int(time.time() * 1000))
                writer.append(rec)
                records.append(rec)

        try:
            for ev in reader:
                if ev is None:
                    score(engine.flush() if engine.flush_due() else None)
                else:
                    score(engine.ingest(ev))
            score(engine.flush() if engine.open_window else None)
        finally:
            reader.close()
    wall = time.monotonic() - t0
    write_f2_series(records, out / "f2_series.csv")
    engine.records = records
    summary = _stream_summary(cfg, engine, reader.stats, wall, server)
    summary["checkpoint"] = str(cfg.checkpoint)
    write_json(summary, out / "summary.json")
    return StreamResult(records, summary)


def _variant_labels(variants: Sequence[ModelArch]) -> list[str]:
    labels, seen = [], {}
    for arch in variants:
        base = f"{arch.variant}-u{arch.units}-k{arch.branches}"
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}-{seen[base]}")
    return labels


def compare_architectures(
    events: Sequence[SysmonEvent],
    variants: Sequence[ModelArch],
    config: EngineConfig,
    *,
    seed: int = 0,
    schema: EventSchema | None = None,
    out_dir: Path | None = None,
) -> dict:
    """Run the same events through each variant. A failing variant is reported, not fatal."""
    if len(variants) < 2:
        raise InvalidConfig("compare needs at least two variants")
    results = {}
    for label, arch in zip(_variant_labels(variants), variants):
        vdir = Path(out_dir) / label if out_dir is not None else None
        if vdir is not None:
            vdir.mkdir(parents=True, exist_ok=True)
            (vdir / "metrics.csv").unlink(missing_ok=True)
        engine = IncrementalEngine(
            config, arch, seed=seed, schema=schema,
            metrics_path=vdir / "metrics.csv" if vdir else None, save_checkpoints=False,
        )
        t0 = time.monotonic()
        try:
            engine.run(events)
        except Exception as exc:  # noqa: BLE001 - one variant must not sink the rest
            log.error("variant %s failed: %s", label, exc)
            results[label] = {"arch": arch.to_dict(), "error": f"{type(exc).__name__}: {exc}"}
            continue
        doc = {
            "arch": arch.to_dict(),
            "wall_s": time.monotonic() - t0,
            "summary": summarize(engine.records),
            "after_baseline": summarize(engine.records, skip_baseline=True),
            "windows": [r.to_dict() for r in engine.records],
        }
        if vdir is not None:
            write_f2_series(engine.records, vdir / "f2_series.csv")
        results[label] = doc
    report = comparison_report(results)
    if out_dir is not None:
        write_json(report, Path(out_dir) / "comparison.json")
    return report


def sweep_table(probs, labels, thresholds=SWEEP_THRESHOLDS) -> list[dict]:
    y = np.asarray(labels, dtype=bool)
    rows = []
    for t in thresholds:
        c = confusion(y, probs >= t)
        r = rates(c)
        rows.append({"threshold": float(t), "precision": r.precision, "recall": r.recall, "f2": f_beta(r.precision, r.recall, 2.0)})
    return rows


def sweep_threshold(checkpoint: Path, events: Sequence[SysmonEvent], *, schema=None, out_dir: Path | None = None) -> dict:
    """F2 over thresholds 0.01..0.99 and the first threshold reaching the maximum."""
    if not events or any(ev.label is None for ev in events):
        raise UnlabeledStream("threshold sweep needs a fully labeled stream")
    ckpt = load_checkpoint(checkpoint)
    engine = IncrementalEngine(EngineConfig(), ckpt.arch, seed=ckpt.seed, schema=schema, ngram=ckpt.ngram, save_checkpoints=False)
    engine.load_state(ckpt)
    probs = engine.predict_proba_events(list(events))
    rows = sweep_table(probs, [ev.is_ransomware for ev in events])
    best = max(rows, key=lambda r: r["f2"])
    doc = {"best_threshold": best["threshold"], "best_f2": best["f2"], "events": len(events), "rows": rows}
    if out_dir is not None:
        with open(Path(out_dir) / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("threshold", "precision", "recall", "f2"))
            for r in rows:
                w.writerow((r["threshold"], repr(r["precision"]), repr(r["recall"]), repr(r["f2"])))
        write_json({k: v for k, v in doc.items() if k != "rows"}, Path(out_dir) / "sweep.json")
    return doc


__all__ = [
    "EventReader", "MODES", "RunConfig", "StreamResult", "TcpLineServer", "compare_architectures",
    "load_stream", "open_lines", "parse_input", "run_infer", "run_stream", "sweep_table", "sweep_threshold",
]
