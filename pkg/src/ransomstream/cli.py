"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 training diverged, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import __version__
from .engine import EngineConfig, parse_groups
from .errors import (
    CheckpointError,
    EmptyHistory,
    EventError,
    InputUnavailable,
    InvalidConfig,
    SingleClassBatch,
    TrainingDiverged,
    UnlabeledStream,
)
from .events import EventSchema, default_schema
from .harness import MODES, RunConfig, compare_architectures, load_stream, run_infer, run_stream, sweep_threshold
from .metrics import write_json
from .neural.model import BRANCH_MODES, VARIANTS, ModelArch
from .synth import GeneratorConfig, generate

log = logging.getLogger("ransomstream")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

# flag dest -> (target, field) for values that land in EngineConfig / ModelArch
_ENGINE_FLAGS = {
    "initial_window": "initial_window",
    "update_window": "update_window",
    "threshold": "threshold",
    "flush_interval": "flush_interval",
    "sgd_batch": "sgd_batch",
    "initial_epochs": "initial_epochs",
    "update_epochs": "update_epochs",
    "retrain_epochs": "retrain_epochs",
    "dtype": "dtype",
    "branch_mode": "branch_mode",
    "freeze": "freeze_groups",
}
_ARCH_FLAGS = {
    "arch_variant": "variant",
    "branches": "branches",
    "units": "units",
    "filters": "filters",
    "kernel_size": "kernel_size",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ransomstream", description="Incremental ransomware detection over Sysmon event streams.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--input", help="JSONL file or tcp:host:port")
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema", type=Path, help="feature schema JSON (default: bundled 52-feature schema)")
    p.add_argument("--config", type=Path, help="JSON file; its keys override any flag")
    p.add_argument("--checkpoint", type=Path, help="checkpoint path (infer-stream, sweep-threshold, or train-stream override)")
    p.add_argument("--resume", action="store_true", help="train-stream: continue from an existing checkpoint")
    p.add_argument("--on-parse-error", choices=("skip", "fail"), default="skip")
    p.add_argument("--queue-size", type=int, default=4096)
    p.add_argument("--max-clients", type=int, help="tcp: stop after this many client connections close")
    p.add_argument("-v", "--verbose", action="count", default=0)

    g = p.add_argument_group("engine")
    g.add_argument("--initial-window", type=int)
    g.add_argument("--update-window", type=int)
    g.add_argument("--threshold", type=float)
    g.add_argument("--flush-interval", type=float, help="seconds; close a partial window after this long")
    g.add_argument("--freeze", help="layer groups frozen during fine-tuning: all, none or e.g. conv,lstm")
    g.add_argument("--sgd-batch", type=int, help="default: 1024, capped at the update window's train split")
    g.add_argument("--initial-epochs", type=int)
    g.add_argument("--update-epochs", type=int)
    g.add_argument("--retrain-epochs", type=int)
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--branch-mode", choices=BRANCH_MODES)

    a = p.add_argument_group("architecture")
    a.add_argument("--arch-variant", choices=VARIANTS)
    a.add_argument("--branches", type=int, help="parallel LSTM branches (stacked layers for stacked_sequential)")
    a.add_argument("--units", type=int)
    a.add_argument("--filters", type=int)
    a.add_argument("--kernel-size", type=int)
    a.add_argument(
        "--variants", nargs="+", metavar="VARIANT[:key=val,...]",
        help="compare: e.g. parallel_attention stacked_sequential lstm_only:units=8",
    )

    s = p.add_argument_group("generate")
    s.add_argument("--total-events", type=int, default=200_000)
    s.add_argument("--benign-fraction", type=float, default=0.88)
    s.add_argument("--signal-free", action="store_true")
    s.add_argument("--output", type=Path, help="generate: JSONL path (default OUT_DIR/events.jsonl)")
    return p


def _coerce_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_variant(spec: str, base: ModelArch) -> ModelArch:
    name, _, rest = spec.partition(":")
    kw = {"variant": name}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise InvalidConfig(f"bad variant option {item!r} in {spec!r}")
        kw[key.strip()] = _coerce_value(value.strip())
    try:
        return base.with_(**kw)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad variant {spec!r}: {exc}") from None


def _apply_file_config(args: argparse.Namespace, path: Path) -> dict:
    """Overlay top-level keys onto args; return nested engine/arch overrides."""
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise InvalidConfig("config file must hold a JSON object")
    nested = {"engine": doc.pop("engine", {}), "arch": doc.pop("arch", {})}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise InvalidConfig(f"unknown config key {key!r}")
        if dest in ("out_dir", "schema", "checkpoint", "output", "config") and value is not None:
            value = Path(value)
        setattr(args, dest, value)
    return nested


def build_run_config(args: argparse.Namespace) -> RunConfig:
    nested = _apply_file_config(args, args.config) if args.config else {"engine": {}, "arch": {}}
    engine_kw = {field: getattr(args, dest) for dest, field in _ENGINE_FLAGS.items() if getattr(args, dest) is not None}
    if "freeze_groups" in engine_kw:
        engine_kw["freeze_groups"] = parse_groups(engine_kw["freeze_groups"])
    engine_kw.update(nested["engine"])
    if "sgd_batch" not in engine_kw:
        defaults = EngineConfig()
        window = engine_kw.get("update_window", defaults.update_window)
        frac = engine_kw.get("train_fraction", defaults.train_fraction)
        engine_kw["sgd_batch"] = max(1, min(defaults.sgd_batch, int(window * frac)))
    try:
        engine = EngineConfig.from_dict({**EngineConfig().to_dict(), **engine_kw})
        arch_kw = {field: getattr(args, dest) for dest, field in _ARCH_FLAGS.items() if getattr(args, dest) is not None}
        arch = ModelArch.from_dict({**ModelArch().to_dict(), **arch_kw, **nested["arch"]})
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from None
    schema = EventSchema.load(args.schema) if args.schema else default_schema()
    variants = tuple(parse_variant(v, arch) for v in (args.variants or ()))
    return RunConfig(
        mode=args.mode, input=args.input, out_dir=args.out_dir, seed=args.seed, schema=schema,
        engine=engine, arch=arch, checkpoint=args.checkpoint, resume=args.resume,
        on_parse_error=args.on_parse_error, queue_size=args.queue_size, max_clients=args.max_clients,
        variants=variants,
    )


def _install_stop_handlers(stop: threading.Event) -> None:
    def handler(signum, frame):
        log.info("signal %d received, stopping after the current event", signum)
        stop.set()

    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, handler)


def _require_input(cfg: RunConfig) -> None:
    if not cfg.input:
        raise InputUnavailable(f"--input is required for {cfg.mode}")


def execute(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    cfg.validate()
    stop = threading.Event()
    if cfg.mode == "generate":
        gen = GeneratorConfig.scaled(
            args.total_events, benign_fraction=args.benign_fraction, seed=args.seed, signal=not args.signal_free,
        )
        path = args.output or cfg.out_dir / "events.jsonl"
        manifest = generate(gen, path, cfg.schema)
        write_json(manifest, path.with_suffix(".manifest.json"))
        print(f"wrote {manifest['total_events']} events to {path}")
        return EXIT_OK
    _require_input(cfg)
    if cfg.mode == "train-stream":
        _install_stop_handlers(stop)
        result = run_stream(cfg, stop=stop)
        m = result.summary["metrics_after_baseline"]
        print(f"{result.summary['windows']} windows; mean F2 after baseline {m.get('mean_f2', float('nan')):.4f}")
        return EXIT_DIVERGED if result.summary["failures"] else EXIT_OK
    if cfg.mode == "infer-stream":
        _install_stop_handlers(stop)
        result = run_infer(cfg, stop=stop)
        print(f"scored {result.summary['reader']['events']} events in {result.summary['windows']} labeled windows")
        return EXIT_OK
    events, _ = load_stream(cfg.input, cfg.schema, cfg.on_parse_error)
    if cfg.mode == "compare":
        variants = cfg.variants or (cfg.arch, cfg.arch.with_(variant="stacked_sequential"))
        report = compare_architectures(events, variants, cfg.engine, seed=cfg.seed, schema=cfg.schema, out_dir=cfg.out_dir)
        for label, doc in report["variants"].items():
            if "error" in doc:
                print(f"{label}: FAILED {doc['error']}")
            else:
                s = doc["summary"]
                print(f"{label}: mean F2 {s['mean_f2']:.4f}, runtime {s['total_runtime_s']:.1f}s")
        return EXIT_OK
    if cfg.checkpoint is None:
        raise InvalidConfig("sweep-threshold needs --checkpoint")
    doc = sweep_threshold(cfg.checkpoint, events, schema=cfg.schema, out_dir=cfg.out_dir)
    print(f"best threshold {doc['best_threshold']:.2f} (F2 {doc['best_f2']:.4f})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return execute(args)
    except (InputUnavailable, EventError, UnlabeledStream, InvalidConfig, SingleClassBatch, EmptyHistory) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
