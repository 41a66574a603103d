"""CNN-LSTM-attention classifier with parallel LSTM branches, plus baseline variants."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import SequenceTooShort, ShapeMismatch, UnknownGroup
from . import layers as L

VARIANTS = ("parallel_attention", "stacked_sequential", "lstm_only", "cnn_attention_only")
GROUPS = ("conv", "lstm", "attention", "dense")
BRANCH_MODES = ("fused", "threads", "sequential")


@dataclass(frozen=True)
class ModelArch:
    variant: str = "parallel_attention"
    branches: int = 2
    conv_stack_depth: int = 2
    filters: int = 32
    kernel_size: int = 9
    units: int = 384
    attention_dim: int | None = None
    dense_sizes: tuple[int, ...] = (80, 2)
    dropout_lstm: float = 0.10326648213511579
    dropout_dense: float = 0.4057318990206279
    combiner: str = "concat"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dense_sizes[-1] != 2:
            raise ValueError("the output layer must have exactly 2 units")
        if not (0.0 <= self.dropout_lstm < 1.0 and 0.0 <= self.dropout_dense < 1.0):
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.branches < 1 or self.units < 1 or self.filters < 1 or self.kernel_size < 1:
            raise ValueError("branches, units, filters and kernel_size must be positive")
        if self.combiner not in ("concat", "context"):
            raise ValueError("combiner must be 'concat' or 'context'")
        object.__setattr__(self, "dense_sizes", tuple(int(s) for s in self.dense_sizes))

    @property
    def attn_dim(self) -> int:
        return self.attention_dim or (self.filters if self.variant == "cnn_attention_only" else self.units)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_sizes"] = list(self.dense_sizes)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelArch":
        doc = dict(doc)
        if "dense_sizes" in doc:
            doc["dense_sizes"] = tuple(doc["dense_sizes"])
        return cls(**doc)

    def with_(self, **kw) -> "ModelArch":
        return replace(self, **kw)

    def conv_output_length(self, input_length: int) -> int:
        if self.variant == "lstm_only":
            return input_length
        return input_length - self.conv_stack_depth * (self.kernel_size - 1)


def group_of(name: str) -> str:
    prefix = name.split(".", 1)[0].rstrip("0123456789")
    return {"conv": "conv", "lstm": "lstm", "attn": "attention", "dense": "dense"}[prefix]


def _lecun_uniform(rng, shape, fan_in):
    limit = math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Model:
    """Parameter set plus the forward/backward passes for one architecture.

    Inputs are (batch, features, dim) matrices, read as a single-channel
    sequence of length ``features * dim`` (feature-major).
    """

    arch: ModelArch
    input_shape: tuple[int, int]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)
    dtype: type = np.float64
    branch_mode: str = "fused"

    @classmethod
    def build(cls, arch: ModelArch, input_shape, seed: int = 0, **kw) -> "Model":
        model = cls(arch, tuple(int(s) for s in input_shape), **kw)
        model.init_params(np.random.default_rng(seed))
        return model

    # ------------------------------------------------------------------ structure

    @property
    def seq_len(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    def lstm_layout(self) -> list[tuple[int, int]]:
        """(branch_count, input_size) per LSTM layer, in evaluation order."""
        a = self.arch
        if a.variant == "parallel_attention":
            return [(a.branches, a.filters)]
        if a.variant == "stacked_sequential":
            return [(1, a.filters if i == 0 else a.units) for i in range(a.branches)]
        if a.variant == "lstm_only":
            return [(1, 1)]
        return []

    def feature_width(self) -> int:
        a = self.arch
        if a.variant == "lstm_only":
            return a.units
        width = a.filters if a.variant == "cnn_attention_only" else a.units
        per_branch = 2 * width if a.combiner == "concat" else width
        n_out = a.branches if a.variant == "parallel_attention" else 1
        return per_branch * n_out

    def init_params(self, rng) -> None:
        a = self.arch
        p: dict[str, np.ndarray] = {}
        if a.variant != "lstm_only":
            if a.conv_output_length(self.seq_len) < 1:
                raise SequenceTooShort(
                    f"input sequence of length {self.seq_len} too short for "
                    f"{a.conv_stack_depth} conv layers of width {a.kernel_size}"
                )
            cin = 1
            for i in range(a.conv_stack_depth):
                fan_in = a.kernel_size * cin
                p[f"conv{i}.w"] = _lecun_uniform(rng, (a.filters, a.kernel_size, cin), fan_in)
                p[f"conv{i}.b"] = np.zeros(a.filters)
                cin = a.filters
        for i, (k, inp) in enumerate(self.lstm_layout()):
            rows = a.units + inp
            p[f"lstm{i}.W"] = _lecun_uniform(rng, (k, rows, 4 * a.units), rows)
            b = np.zeros((k, 4 * a.units))
            b[:, : a.units] = 1.0  # forget gate
            p[f"lstm{i}.b"] = b
        if a.variant in ("parallel_attention", "stacked_sequential", "cnn_attention_only"):
            k = a.branches if a.variant == "parallel_attention" else 1
            width = a.filters if a.variant == "cnn_attention_only" else a.units
            p["attn.W"] = _lecun_uniform(rng, (k, a.attn_dim, width), width)
            p["attn.v"] = _lecun_uniform(rng, (k, a.attn_dim), a.attn_dim)
        fan_in = self.feature_width()
        for i, size in enumerate(a.dense_sizes):
            p[f"dense{i}.w"] = _lecun_uniform(rng, (fan_in, size), fan_in)
            p[f"dense{i}.b"] = np.zeros(size)
            fan_in = size
        self.params = p

    def group_names(self, group: str) -> list[str]:
        return [n for n in self.params if group_of(n) == group]

    def trainable(self) -> list[str]:
        return [n for n in self.params if group_of(n) not in self.frozen]

    def copy(self) -> "Model":
        return Model(
            self.arch,
            self.input_shape,
            {k: v.copy() for k, v in self.params.items()},
            set(self.frozen),
            self.dtype,
            self.branch_mode,
        )

    def snap_to_float32(self) -> None:
        """Round parameters to float32-representable values (the checkpoint precision)."""
        for name, value in self.params.items():
            self.params[name] = value.astype(np.float32).astype(np.float64)

    # ------------------------------------------------------------------ forward

    def _p(self, name):
        return self.params[name].astype(self.dtype, copy=False)

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"expected input (batch, {self.input_shape[0]}, {self.input_shape[1]}), got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def _run_branches(self, fn, *arrays):
        """Evaluate ``fn`` over the branch axis of the given arrays per ``branch_mode``."""
        k = arrays[0].shape[0]
        if self.branch_mode == "fused" or k == 1:
            return fn(*arrays)
        slices = [[arr[j : j + 1] for arr in arrays] for j in range(k)]
        if self.branch_mode == "threads":
            with ThreadPoolExecutor(max_workers=k) as pool:
                parts = list(pool.map(lambda s: fn(*s), slices))
        elif self.branch_mode == "sequential":
            parts = [fn(*s) for s in slices]
        else:
            raise ValueError(f"unknown branch_mode {self.branch_mode!r}")
        return parts

    def forward(self, x, mode: str = "infer", rng=None, return_cache: bool = False):
        """Class probabilities (batch, 2). Dropout runs only when ``mode == 'train'``."""
        a = self.arch
        x = self._check_input(x)
        train = mode == "train"
        if train and rng is None and (a.dropout_lstm > 0 or a.dropout_dense > 0):
            raise ValueError("train mode needs an rng for dropout")
        batch = x.shape[0]
        cache: dict = {}
        seq = x.reshape(batch, self.seq_len, 1)

        if a.variant != "lstm_only":
            for i in range(a.conv_stack_depth):
                cp = L.ConvParams(self._p(f"conv{i}.w"), self._p(f"conv{i}.b"))
                seq, cache[f"conv{i}"] = L.conv1d_forward(seq, cp, return_cache=True)

        if a.variant == "parallel_attention":
            feats = self._parallel_forward(seq, cache)
        elif a.variant == "stacked_sequential":
            hs = seq
            for i in range(a.branches):
                hs_k, cache[f"lstm{i}"] = L.lstm_forward(hs if i == 0 else hs[None], self._p(f"lstm{i}.W"), self._p(f"lstm{i}.b"))
                hs = hs_k[0]
            feats = self._attend(hs_k, cache)
        elif a.variant == "lstm_only":
            hs_k, cache["lstm0"] = L.lstm_forward(seq, self._p("lstm0.W"), self._p("lstm0.b"))
            feats = hs_k[0, :, -1, :]
        else:
            feats = self._attend(seq[None], cache)

        d0 = L.dropout_mask(feats.shape, a.dropout_lstm, rng, self.dtype) if train else None
        h = feats * d0 if d0 is not None else feats
        cache["drop0"] = d0
        n_dense = len(a.dense_sizes)
        for i in range(n_dense):
            last = i == n_dense - 1
            w, b = self._p(f"dense{i}.w"), self._p(f"dense{i}.b")
            out = L.dense_forward(h, w, b, None if last else "tanh")
            cache[f"dense{i}"] = (h, out)
            h = out
            if not last:
                dm = L.dropout_mask(h.shape, a.dropout_dense, rng, self.dtype) if train else None
                cache[f"drop_dense{i}"] = dm
                if dm is not None:
                    h = h * dm
        logits = h
        probs = L.softmax(logits.astype(np.float64), axis=-1)
        cache["logits"] = logits
        cache["batch"] = batch
        return (probs, cache) if return_cache else probs

    def _attend(self, hs, cache):
        """Attention over (K, B, T, U) states; returns combined features (B, K*width)."""
        a = self.arch
        ctx, _, cache["attn"] = L.attention_batch_forward(hs, self._p("attn.W"), self._p("attn.v"))
        out = L.combine(ctx, hs[:, :, -1, :], a.combiner)
        cache["attn_hs"] = hs
        k, batch = out.shape[:2]
        return out.transpose(1, 0, 2).reshape(batch, -1)

    def _parallel_forward(self, seq, cache):
        a = self.arch
        w, b = self._p("lstm0.W"), self._p("lstm0.b")
        aw, av = self._p("attn.W"), self._p("attn.v")

        def branch(w_k, b_k, aw_k, av_k):
            hs, lc = L.lstm_forward(seq, w_k, b_k)
            ctx, _, ac = L.attention_batch_forward(hs, aw_k, av_k)
            return L.combine(ctx, hs[:, :, -1, :], a.combiner), lc, ac

        res = self._run_branches(branch, w, b, aw, av)
        if isinstance(res, tuple):
            out, cache["lstm0"], cache["attn"] = res
            cache["branch_split"] = False
        else:
            out = np.concatenate([r[0] for r in res], axis=0)
            cache["lstm0"] = [r[1] for r in res]
            cache["attn"] = [r[2] for r in res]
            cache["branch_split"] = True
        k, batch = out.shape[:2]
        return out.transpose(1, 0, 2).reshape(batch, -1)

    # ------------------------------------------------------------------ backward

    def backward(self, cache, dlogits) -> dict[str, np.ndarray]:
        """Gradients of the loss for every parameter; frozen groups are skipped where possible."""
        a = self.arch
        grads: dict[str, np.ndarray] = {}
        n_dense = len(a.dense_sizes)
        dh = dlogits.astype(self.dtype, copy=False)
        for i in range(n_dense - 1, -1, -1):
            last = i == n_dense - 1
            if not last:
                dm = cache[f"drop_dense{i}"]
                if dm is not None:
                    dh = dh * dm
            x_in, out = cache[f"dense{i}"]
            dh, grads[f"dense{i}.w"], grads[f"dense{i}.b"] = L.dense_backward(
                dh, x_in, self._p(f"dense{i}.w"), out, None if last else "tanh"
            )
        if cache["drop0"] is not None:
            dh = dh * cache["drop0"]
        dfeats = dh
        batch = cache["batch"]

        upstream_needed = "conv" not in self.frozen and a.variant != "lstm_only"
        dseq = None
        if a.variant == "parallel_attention":
            dseq = self._parallel_backward(dfeats, cache, grads, upstream_needed)
        elif a.variant == "stacked_sequential":
            dhs = self._attend_backward(dfeats, cache, grads)
            for i in range(a.branches - 1, -1, -1):
                need = i > 0 or upstream_needed
                dx, grads[f"lstm{i}.W"], grads[f"lstm{i}.b"] = L.lstm_backward(dhs, cache[f"lstm{i}"], need)
                if i > 0:
                    dhs = dx
                else:
                    dseq = dx
        elif a.variant == "lstm_only":
            u = a.units
            dhs = np.zeros((1, batch, self.seq_len, u), dtype=dfeats.dtype)
            dhs[0, :, -1, :] = dfeats
            _, grads["lstm0.W"], grads["lstm0.b"] = L.lstm_backward(dhs, cache["lstm0"], False)
        else:
            dhs = self._attend_backward(dfeats, cache, grads)
            dseq = dhs[0]

        if a.variant != "lstm_only":
            for i in range(a.conv_stack_depth - 1, -1, -1):
                cp = L.ConvParams(self._p(f"conv{i}.w"), self._p(f"conv{i}.b"))
                if dseq is None:
                    grads[f"conv{i}.w"] = np.zeros_like(self.params[f"conv{i}.w"])
                    grads[f"conv{i}.b"] = np.zeros_like(self.params[f"conv{i}.b"])
                    continue
                dseq, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = L.conv1d_backward(dseq, cp, cache[f"conv{i}"], need_dx=i > 0)
        return {k: v.astype(np.float64, copy=False) for k, v in grads.items()}

    def _split_feats(self, dfeats, k):
        batch = dfeats.shape[0]
        return dfeats.reshape(batch, k, -1).transpose(1, 0, 2)

    def _combine_backward(self, dcomb):
        if self.arch.combiner == "concat":
            half = dcomb.shape[-1] // 2
            return dcomb[..., :half], dcomb[..., half:]
        return dcomb, None

    def _attend_backward(self, dfeats, cache, grads):
        hs = cache["attn_hs"]
        dcomb = self._split_feats(dfeats, hs.shape[0])
        dctx, dlast = self._combine_backward(dcomb)
        dhs, grads["attn.W"], grads["attn.v"] = L.attention_batch_backward(np.ascontiguousarray(dctx), cache["attn"])
        if dlast is not None:
            dhs[:, :, -1, :] += dlast
        return dhs

    def _parallel_backward(self, dfeats, cache, grads, need_dx):
        k = self.arch.branches
        dcomb = self._split_feats(dfeats, k)

        def branch(dcomb_k, lc, ac):
            dctx, dlast = self._combine_backward(dcomb_k)
            dhs, daw, dav = L.attention_batch_backward(np.ascontiguousarray(dctx), ac)
            if dlast is not None:
                dhs[:, :, -1, :] += dlast
            dx, dw, db = L.lstm_backward(dhs, lc, need_dx)
            return dx, dw, db, daw, dav

        if not cache["branch_split"]:
            dx, grads["lstm0.W"], grads["lstm0.b"], grads["attn.W"], grads["attn.v"] = branch(dcomb, cache["lstm0"], cache["attn"])
            return dx
        items = [(dcomb[j : j + 1], cache["lstm0"][j], cache["attn"][j]) for j in range(k)]
        if self.branch_mode == "threads":
            with ThreadPoolExecutor(max_workers=k) as pool:
                res = list(pool.map(lambda it: branch(*it), items))
        else:
            res = [branch(*it) for it in items]
        grads["lstm0.W"] = np.concatenate([r[1] for r in res], axis=0)
        grads["lstm0.b"] = np.concatenate([r[2] for r in res], axis=0)
        grads["attn.W"] = np.concatenate([r[3] for r in res], axis=0)
        grads["attn.v"] = np.concatenate([r[4] for r in res], axis=0)
        if not need_dx:
            return None
        dx = res[0][0].copy()
        for r in res[1:]:
            dx += r[0]
        return dx

    # ------------------------------------------------------------------ helpers

    def loss_and_grads(self, x, labels, rng=None, mode: str = "train"):
        probs, cache = self.forward(x, mode=mode, rng=rng, return_cache=True)
        loss, _, dlogits = L.softmax_cross_entropy(cache["logits"].astype(np.float64), np.asarray(labels))
        return loss, self.backward(cache, dlogits)

    def loss(self, x, labels, rng=None, mode: str = "infer") -> float:
        probs, cache = self.forward(x, mode=mode, rng=rng, return_cache=True)
        loss, _, _ = L.softmax_cross_entropy(cache["logits"].astype(np.float64), np.asarray(labels))
        return loss

    def predict_proba(self, x, chunk: int = 2048) -> np.ndarray:
        x = self._check_input(x)
        if x.shape[0] <= chunk:
            return self.forward(x, mode="infer")
        return np.concatenate([self.forward(x[i : i + chunk], mode="infer") for i in range(0, x.shape[0], chunk)])


def set_frozen(model: Model, groups) -> Model:
    """Mark parameter groups as excluded from optimizer updates."""
    groups = set(groups)
    unknown = groups.difference(GROUPS)
    if unknown:
        raise UnknownGroup(f"unknown parameter group(s): {sorted(unknown)}; expected {GROUPS}")
    model.frozen = groups
    return model


def model_forward(sample, model: Model, mode: str = "infer", rng=None) -> np.ndarray:
    """Probabilities [P(benign), P(ransomware)] for a single (features, dim) sample."""
    sample = np.asarray(getattr(sample, "matrix", sample))
    if sample.ndim != 2:
        raise ShapeMismatch(f"a single sample must be 2-D, got {sample.shape}")
    return model.forward(sample[None], mode=mode, rng=rng)[0]


def predict(sample, model: Model, threshold: float = 0.5) -> str:
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie strictly between 0 and 1")
    p = model_forward(sample, model)[1]
    return "ransomware" if p >= threshold else "benign"


def predict_labels(probs_ransomware, threshold: float = 0.5) -> np.ndarray:
    """1 for ransomware where P(ransomware) >= threshold."""
    return (np.asarray(probs_ransomware) >= threshold).astype(np.int64)
