"""Versioned binary checkpoints.

Layout (little-endian)::

    b"ICLS" | u32 format_version | section* | u32 crc32

Each section is ``4-byte tag | u64 length | payload``. The CRC covers every
byte before it. Model parameters are stored as float32; optimizer moments and
scaler statistics keep float64 so a resumed run continues bit-exactly.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import NgramVocabConfig
from .errors import CheckpointUnavailable, CorruptCheckpoint, VersionMismatch
from .neural.model import Model, ModelArch, group_of
from .neural.optim import OptimizerState
from .preprocessing import FeatureRanking, ScalerParams

MAGIC = b"ICLS"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class ModelCheckpoint:
    arch: ModelArch
    input_shape: tuple[int, int]
    params: dict[str, np.ndarray]
    frozen: frozenset[str]
    optimizer: OptimizerState
    ngram: NgramVocabConfig
    scaler: ScalerParams
    ranking: FeatureRanking
    window_id: int
    seed: int
    format_version: int = FORMAT_VERSION
    # engine progress (events consumed, pending metrics, counters); opaque here
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, optimizer, ngram, scaler, ranking, window_id, seed, meta=None) -> "ModelCheckpoint":
        return cls(
            model.arch, model.input_shape, {k: v.copy() for k, v in model.params.items()}, frozenset(model.frozen),
            optimizer, ngram, scaler, ranking, int(window_id), int(seed), FORMAT_VERSION, dict(meta or {}),
        )

    def to_model(self, **kw) -> Model:
        model = Model(self.arch, tuple(self.input_shape), {k: v.copy() for k, v in self.params.items()}, set(self.frozen), **kw)
        return model


# --------------------------------------------------------------------------- encoding


def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray, dtype: np.dtype, flag: int = 0) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=dtype)
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BBB", flag, _CODES[dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_array(view: memoryview, pos: int):
    (n,) = struct.unpack_from("<H", view, pos)
    pos += 2
    name = bytes(view[pos : pos + n]).decode("utf-8")
    pos += n
    flag, code, ndim = struct.unpack_from("<BBB", view, pos)
    pos += 3
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    if pos + nbytes > len(view):
        raise CorruptCheckpoint("array payload runs past its section")
    arr = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(shape).astype(np.float64 if code < 2 else np.int64)
    return name, flag, arr, pos + nbytes


def _arrays(items, dtype) -> bytes:
    buf = io.BytesIO()
    items = list(items)
    buf.write(struct.pack("<I", len(items)))
    for name, arr, flag in items:
        _write_array(buf, name, arr, dtype, flag)
    return buf.getvalue()


def _parse_arrays(payload: bytes) -> list[tuple[str, int, np.ndarray]]:
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    out = []
    for _ in range(count):
        name, flag, arr, pos = _read_array(view, pos)
        out.append((name, flag, arr))
    if pos != len(view):
        raise CorruptCheckpoint("trailing bytes in array section")
    return out


def _json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    f32, f64 = _DTYPES[0], _DTYPES[1]
    sections = [
        (b"ARCH", _json({"arch": ckpt.arch.to_dict(), "input_shape": list(ckpt.input_shape)})),
        (b"PARM", _arrays(((k, v, int(group_of(k) in ckpt.frozen)) for k, v in ckpt.params.items()), f32)),
        (b"FRZN", _json(sorted(ckpt.frozen))),
        (b"OPTH", _json(ckpt.optimizer.hyper())),
        (b"OPTM", _arrays(((k, v, 0) for k, v in sorted(ckpt.optimizer.m.items())), f64)),
        (b"OPTV", _arrays(((k, v, 0) for k, v in sorted(ckpt.optimizer.v.items())), f64)),
        (b"NGRM", _json(ckpt.ngram.to_dict())),
        (b"SCAL", _arrays([("mean", ckpt.scaler.mean, 0), ("std", ckpt.scaler.std, 0)], f64) + struct.pack("<q", ckpt.scaler.fitted_on)),
        (b"RANK", _json(ckpt.ranking.to_dict())),
        (b"SEED", struct.pack("<Qq", ckpt.seed & 0xFFFFFFFFFFFFFFFF, ckpt.window_id)),
        (b"META", _json(ckpt.meta)),
    ]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    for tag, payload in sections:
        buf.write(tag)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> ModelCheckpoint:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    sections: dict[bytes, bytes] = {}
    pos = 8
    while pos < len(body):
        if pos + 12 > len(body):
            raise CorruptCheckpoint("truncated section header")
        tag = body[pos : pos + 4]
        (length,) = struct.unpack_from("<Q", body, pos + 4)
        pos += 12
        if pos + length > len(body):
            raise CorruptCheckpoint(f"section {tag!r} is truncated")
        sections[tag] = body[pos : pos + length]
        pos += length
    try:
        arch_doc = json.loads(sections[b"ARCH"])
        params = {name: arr for name, _, arr in _parse_arrays(sections[b"PARM"])}
        frozen = frozenset(json.loads(sections[b"FRZN"]))
        opt = OptimizerState(**json.loads(sections[b"OPTH"]))
        opt.m = {name: arr for name, _, arr in _parse_arrays(sections[b"OPTM"])}
        opt.v = {name: arr for name, _, arr in _parse_arrays(sections[b"OPTV"])}
        scal = sections[b"SCAL"]
        stats = {name: arr for name, _, arr in _parse_arrays(scal[:-8])}
        (fitted_on,) = struct.unpack("<q", scal[-8:])
        seed, window_id = struct.unpack("<Qq", sections[b"SEED"])
        return ModelCheckpoint(
            arch=ModelArch.from_dict(arch_doc["arch"]),
            input_shape=tuple(arch_doc["input_shape"]),
            params=params,
            frozen=frozen,
            optimizer=opt,
            ngram=NgramVocabConfig.from_dict(json.loads(sections[b"NGRM"])),
            scaler=ScalerParams(stats["mean"], stats["std"], fitted_on),
            ranking=FeatureRanking.from_dict(json.loads(sections[b"RANK"])),
            window_id=window_id,
            seed=seed,
            format_version=version,
            meta=json.loads(sections[b"META"]),
        )
    except CorruptCheckpoint:
        raise
    except (KeyError, ValueError, TypeError, struct.error) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from None


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    """Atomic write: temp file in the target directory, fsync, rename."""
    path = Path(path)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    try:
        dirfd = os.open(path.parent, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(dirfd)
    except OSError:
        pass
    finally:
        os.close(dirfd)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointUnavailable(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(data)
