"""Numerical kernels: 1D convolution, LSTM, attention, dense, dropout and loss.

Batched kernels carry a leading branch axis ``K`` on LSTM and attention
weights so that K independent branches can be evaluated in one call; slicing
``k:k+1`` runs a single branch with identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionMismatch, SequenceTooShort, ShapeMismatch


def sigmoid(x):
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    if activation in ("identity", None):
        return z
    raise ValueError(f"unknown activation {activation!r}")


# --------------------------------------------------------------------------- conv


@dataclass
class ConvParams:
    """``w`` is (filters, kernel_width, in_channels); ``b`` is (filters,)."""

    w: np.ndarray
    b: np.ndarray
    stride: int = 1
    activation: str = "tanh"

    @property
    def kernel_width(self) -> int:
        return self.w.shape[1]


def conv1d_forward(x, params: ConvParams, *, return_cache: bool = False):
    """Valid 1D convolution, stride 1, followed by the activation.

    ``x`` is (L, C) or batched (B, L, C); output length is ``L - M + 1``.
    """
    if params.stride != 1:
        raise ValueError("only stride 1 is supported")
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"conv input must be (L, C) or (B, L, C), got {x.shape}")
    w = params.w
    filters, m, cin = w.shape
    if x.shape[2] != cin:
        raise DimensionMismatch(f"conv expects {cin} input channels, got {x.shape[2]}")
    batch, length, _ = x.shape
    if length < m:
        raise SequenceTooShort(f"sequence length {length} shorter than kernel width {m}")
    lout = length - m + 1
    # (B, Lout, C, M) -> (B*Lout, M*C) with kernel-major columns
    cols = sliding_window_view(x, m, axis=1).transpose(0, 1, 3, 2).reshape(batch * lout, m * cin)
    z = cols @ w.reshape(filters, m * cin).T + params.b
    z = z.reshape(batch, lout, filters)
    a = _activate(z, params.activation)
    out = a[0] if single else a
    if return_cache:
        return out, {"cols": cols, "a": a, "in_shape": x.shape}
    return out


def conv1d_backward(da, params: ConvParams, cache, need_dx: bool = True):
    """Gradients (dx, dw, db) for a batched conv1d_forward call."""
    w = params.w
    filters, m, cin = w.shape
    batch, length, _ = cache["in_shape"]
    lout = length - m + 1
    if params.activation == "tanh":
        dz = da * (1.0 - cache["a"] ** 2)
    else:
        dz = da
    dz2 = dz.reshape(batch * lout, filters)
    dw = (dz2.T @ cache["cols"]).reshape(filters, m, cin)
    db = dz2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = (dz2 @ w.reshape(filters, m * cin)).reshape(batch, lout, m, cin)
        dx = np.zeros((batch, length, cin), dtype=dz.dtype)
        for j in range(m):
            dx[:, j : j + lout, :] += dcols[:, :, j, :]
    return dx, dw, db


# --------------------------------------------------------------------------- lstm


@dataclass
class LstmParams:
    """Gate weights act on the concatenation ``[h_prev, x_t]``: each is (units, units + input_size)."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_C: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_C: np.ndarray
    b_o: np.ndarray

    @property
    def units(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_f.shape[1] - self.units

    def packed(self):
        """(W, b) in the batched layout: W is (units + input, 4*units), gate order f, i, C, o."""
        w = np.concatenate([self.W_f, self.W_i, self.W_C, self.W_o], axis=0).T
        b = np.concatenate([self.b_f, self.b_i, self.b_C, self.b_o])
        return w, b

    @classmethod
    def unpack(cls, w, b) -> "LstmParams":
        u = w.shape[1] // 4
        parts = [w[:, g * u : (g + 1) * u].T.copy() for g in range(4)]
        biases = [b[g * u : (g + 1) * u].copy() for g in range(4)]
        return cls(*parts, *biases)


def lstm_step(x_t, h_prev, c_prev, params: LstmParams):
    """One LSTM time step; returns (h_t, c_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    u = params.units
    if h_prev.shape[-1] != u or c_prev.shape[-1] != u or x_t.shape[-1] != params.input_size:
        raise DimensionMismatch(
            f"lstm_step expects h,c of size {u} and x of size {params.input_size}; "
            f"got {h_prev.shape}, {c_prev.shape}, {x_t.shape}"
        )
    hx = np.concatenate([h_prev, x_t], axis=-1)
    f_t = sigmoid(hx @ params.W_f.T + params.b_f)
    i_t = sigmoid(hx @ params.W_i.T + params.b_i)
    c_tilde = np.tanh(hx @ params.W_C.T + params.b_C)
    c_t = f_t * c_prev + i_t * c_tilde
    o_t = sigmoid(hx @ params.W_o.T + params.b_o)
    h_t = o_t * np.tanh(c_t)
    return h_t, c_t


def lstm_forward(x, w, b):
    """Run K LSTM branches over a sequence.

    ``x`` is (B, T, I) shared by all branches or (K, B, T, I) per branch;
    ``w`` is (K, U + I, 4U) with rows ordered [h; x]; ``b`` is (K, 4U).
    Returns hidden states (K, B, T, U) and a cache for ``lstm_backward``.
    """
    k, rows, four_u = w.shape
    u = four_u // 4
    shared = x.ndim == 3
    batch, steps, inp = x.shape[-3:]
    if rows != u + inp:
        raise DimensionMismatch(f"LSTM weight rows {rows} != units {u} + input {inp}")
    # sigmoid(a) = 0.5 + 0.5 * tanh(a / 2): halving the f, i, o columns up front
    # lets one tanh call per step cover all four gates (halving is exact)
    scale = np.full(four_u, 0.5, dtype=w.dtype)
    scale[2 * u : 3 * u] = 1.0
    wh = w[:, :u, :] * scale
    wx = w[:, u:, :]
    # time-major internally so every per-step slice is contiguous
    xt = np.ascontiguousarray(np.swapaxes(x, -3, -2)).reshape(1 if shared else k, steps * batch, inp)
    xp = (np.matmul(xt, wx).reshape(k, steps, batch, four_u) + b[:, None, None, :]) * scale

    dtype = xp.dtype
    acts = np.empty((k, steps, batch, four_u), dtype=dtype)
    cs = np.empty((k, steps + 1, batch, u), dtype=dtype)
    hs = np.empty((k, steps + 1, batch, u), dtype=dtype)
    tcs = np.empty((k, steps, batch, u), dtype=dtype)
    cs[:, 0] = 0.0
    hs[:, 0] = 0.0
    for t in range(steps):
        g = acts[:, t]
        np.tanh(xp[:, t] + np.matmul(hs[:, t], wh), out=g)
        for gate in (g[..., : 2 * u], g[..., 3 * u :]):
            gate *= 0.5
            gate += 0.5
        c = g[..., :u] * cs[:, t] + g[..., u : 2 * u] * g[..., 2 * u : 3 * u]
        cs[:, t + 1] = c
        tc = np.tanh(c)
        tcs[:, t] = tc
        hs[:, t + 1] = g[..., 3 * u :] * tc
    cache = {"xt": xt, "w": w, "acts": acts, "cs": cs, "hs": hs, "tcs": tcs, "shared": shared}
    return np.ascontiguousarray(np.swapaxes(hs[:, 1:], 1, 2)), cache


def lstm_backward(dh_all, cache, need_dx: bool = True):
    """Backprop through time for ``lstm_forward``; returns (dx, dw, db)."""
    xt, w, acts, cs, hs, tcs = (cache[key] for key in ("xt", "w", "acts", "cs", "hs", "tcs"))
    k, steps, batch, four_u = acts.shape
    u = four_u // 4
    inp = xt.shape[-1]
    dh_t = np.ascontiguousarray(np.swapaxes(dh_all, 1, 2))
    wh_t = np.ascontiguousarray(w[:, :u, :].transpose(0, 2, 1))
    da_all = np.empty_like(acts)
    dh_next = np.zeros((k, batch, u), dtype=acts.dtype)
    dc_next = np.zeros((k, batch, u), dtype=acts.dtype)
    for t in range(steps - 1, -1, -1):
        g = acts[:, t]
        f, i, cand, o = g[..., :u], g[..., u : 2 * u], g[..., 2 * u : 3 * u], g[..., 3 * u :]
        tc = tcs[:, t]
        dh = dh_t[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = da_all[:, t]
        da[..., :u] = dc * cs[:, t] * f * (1.0 - f)
        da[..., u : 2 * u] = dc * cand * i * (1.0 - i)
        da[..., 2 * u : 3 * u] = dc * i * (1.0 - cand * cand)
        da[..., 3 * u :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = np.matmul(da, wh_t)

    da2 = da_all.reshape(k, steps * batch, four_u)
    h_prev = hs[:, :steps].reshape(k, steps * batch, u)
    dwh = np.matmul(h_prev.transpose(0, 2, 1), da2)
    dwx = np.matmul(xt.transpose(0, 2, 1), da2)
    dw = np.concatenate([dwh, dwx], axis=1)
    db = da2.sum(axis=1)
    dx = None
    if need_dx:
        wx_t = w[:, u:, :].transpose(0, 2, 1)
        dxt = np.matmul(da2, wx_t).reshape(k, steps, batch, inp)
        if cache["shared"]:
            total = dxt[0].copy()
            for j in range(1, k):
                total += dxt[j]
            dx = np.swapaxes(total, 0, 1)
        else:
            dx = np.swapaxes(dxt, 1, 2)
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


# --------------------------------------------------------------------------- attention


@dataclass
class AttentionParams:
    """``W_a`` is (attn_dim, units); ``v_a`` is (attn_dim,)."""

    W_a: np.ndarray
    v_a: np.ndarray


def softmax(e, axis=-1):
    z = e - np.max(e, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def attention_scores(h, params: AttentionParams):
    return np.tanh(np.asarray(h) @ params.W_a.T) @ params.v_a


def attention_forward(h, params: AttentionParams):
    """Attention over one sequence of hidden states ``h`` (T, units).

    Returns the context vector and the attention weights.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ShapeMismatch(f"hidden states must be (T, units) with T >= 1, got {h.shape}")
    if params.W_a.shape[0] != params.v_a.shape[0] or params.W_a.shape[1] != h.shape[1]:
        raise DimensionMismatch("attention parameter shapes do not match hidden size")
    alphas = softmax(attention_scores(h, params))
    return alphas @ h, alphas


def combine(context, h_last, combiner: str = "concat"):
    if combiner == "concat":
        return np.concatenate([context, h_last], axis=-1)
    if combiner == "context":
        return context
    raise ValueError(f"unknown combiner {combiner!r}")


def attention_batch_forward(hs, w_a, v_a):
    """Batched attention over K branches: ``hs`` (K, B, T, U), ``w_a`` (K, D, U), ``v_a`` (K, D).

    Returns context (K, B, U), alphas (K, B, T) and a cache.
    """
    k, batch, steps, u = hs.shape
    h2 = hs.reshape(k, batch * steps, u)
    scores_in = np.tanh(np.matmul(h2, w_a.transpose(0, 2, 1)))
    e = np.matmul(scores_in, v_a[:, :, None])[..., 0].reshape(k, batch, steps)
    alphas = softmax(e, axis=-1)
    context = np.matmul(alphas[:, :, None, :], hs)[:, :, 0, :]
    return context, alphas, {"hs": hs, "w_a": w_a, "v_a": v_a, "scores_in": scores_in, "alphas": alphas}


def attention_batch_backward(dcontext, cache):
    """Returns (dhs, dw_a, dv_a) for ``attention_batch_forward``."""
    hs, w_a, v_a, scores_in, alphas = (cache[key] for key in ("hs", "w_a", "v_a", "scores_in", "alphas"))
    k, batch, steps, u = hs.shape
    dhs = alphas[..., None] * dcontext[:, :, None, :]
    dalpha = np.matmul(hs, dcontext[..., None])[..., 0]
    de = alphas * (dalpha - (alphas * dalpha).sum(axis=-1, keepdims=True))
    de2 = de.reshape(k, batch * steps)
    dv_a = np.matmul(de2[:, None, :], scores_in)[:, 0, :]
    dz = de2[..., None] * v_a[:, None, :] * (1.0 - scores_in * scores_in)
    h2 = hs.reshape(k, batch * steps, u)
    dw_a = np.matmul(dz.transpose(0, 2, 1), h2)
    dhs = dhs + np.matmul(dz, w_a).reshape(k, batch, steps, u)
    return dhs, dw_a, dv_a


# --------------------------------------------------------------------------- dense / dropout / loss


def dense_forward(x, w, b, activation=None):
    z = x @ w + b
    return _activate(z, activation)


def dense_backward(dout, x, w, out, activation=None, need_dx: bool = True):
    dz = dout * (1.0 - out * out) if activation == "tanh" else dout
    dw = x.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ w.T if need_dx else None
    return dx, dw, db


def dropout_mask(shape, rate: float, rng, dtype=np.float64):
    """Inverted-dropout mask: zeros with probability ``rate``, survivors scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, probs, dlogits)."""
    probs = softmax(logits, axis=-1)
    n = logits.shape[0]
    idx = np.arange(n)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -float(log_probs[idx, labels].mean())
    dlogits = probs.copy()
    dlogits[idx, labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits
