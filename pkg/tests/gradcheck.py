"""Finite-difference helpers shared by the neural tests and the acceptance suite."""

import numpy as np

from ransomstream.neural import layers as L
from ransomstream.neural.model import Model, ModelArch

TINY = dict(filters=2, kernel_size=3, units=3, branches=2, dense_sizes=(4, 2), dropout_lstm=0.0, dropout_dense=0.0)


def rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor))) if a.size else 0.0


def numeric_grad(f, arr, eps=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def tiny_problem(variant="parallel_attention", seed=0, combiner="concat", branch_mode="fused", **kw):
    arch = ModelArch(variant=variant, combiner=combiner, **{**TINY, **kw})
    model = Model.build(arch, (2, 4), seed=seed, branch_mode=branch_mode)
    rng = np.random.default_rng(seed + 1)
    # perturb biases away from their zero init so every path carries gradient
    for name, p in model.params.items():
        model.params[name] = p + 0.1 * rng.normal(size=p.shape)
    x = rng.normal(size=(4, 2, 4))
    y = np.array([0, 1, 1, 0])
    return model, x, y


def model_gradcheck(model, x, y, eps=1e-5):
    _, grads = model.loss_and_grads(x, y, mode="train")
    worst = {}
    for name in model.params:
        num = numeric_grad(lambda: model.loss(x, y), model.params[name], eps)
        worst[name] = rel_error(grads[name], num)
    return worst


def layer_gradchecks(seed=0, eps=1e-5):
    """Max relative error per layer type, each checked in isolation on a smooth fixture."""
    rng = np.random.default_rng(seed)
    out = {}

    # conv: loss = sum(r * conv(x))
    x = rng.normal(size=(2, 7, 2))
    params = L.ConvParams(0.3 * rng.normal(size=(3, 3, 2)), 0.1 * rng.normal(size=3))
    r = rng.normal(size=(2, 5, 3))
    f = lambda: float(np.sum(r * L.conv1d_forward(x, params)))
    a, cache = L.conv1d_forward(x, params, return_cache=True)
    dx, dw, db = L.conv1d_backward(r, params, cache)
    out["conv"] = max(rel_error(dw, numeric_grad(f, params.w, eps)), rel_error(db, numeric_grad(f, params.b, eps)),
                      rel_error(dx, numeric_grad(f, x, eps)))

    # lstm, two branches over a shared input
    x = rng.normal(size=(2, 4, 3))
    w = 0.4 * rng.normal(size=(2, 5 + 3, 20))
    b = 0.1 * rng.normal(size=(2, 20))
    r = rng.normal(size=(2, 2, 4, 5))
    f = lambda: float(np.sum(r * L.lstm_forward(x, w, b)[0]))
    _, cache = L.lstm_forward(x, w, b)
    dx, dw, db = L.lstm_backward(r, cache)
    out["lstm"] = max(rel_error(dw, numeric_grad(f, w, eps)), rel_error(db, numeric_grad(f, b, eps)),
                      rel_error(dx, numeric_grad(f, x, eps)))

    # attention
    hs = rng.normal(size=(2, 3, 5, 4))
    wa = 0.5 * rng.normal(size=(2, 3, 4))
    va = rng.normal(size=(2, 3))
    r = rng.normal(size=(2, 3, 4))
    f = lambda: float(np.sum(r * L.attention_batch_forward(hs, wa, va)[0]))
    _, _, cache = L.attention_batch_forward(hs, wa, va)
    dhs, dwa, dva = L.attention_batch_backward(r, cache)
    out["attention"] = max(rel_error(dwa, numeric_grad(f, wa, eps)), rel_error(dva, numeric_grad(f, va, eps)),
                           rel_error(dhs, numeric_grad(f, hs, eps)))

    # dense + tanh
    x = rng.normal(size=(4, 5))
    w = 0.5 * rng.normal(size=(5, 3))
    b = 0.1 * rng.normal(size=3)
    r = rng.normal(size=(4, 3))
    f = lambda: float(np.sum(r * L.dense_forward(x, w, b, "tanh")))
    o = L.dense_forward(x, w, b, "tanh")
    dx, dw, db = L.dense_backward(r, x, w, o, "tanh")
    out["dense"] = max(rel_error(dw, numeric_grad(f, w, eps)), rel_error(db, numeric_grad(f, b, eps)),
                       rel_error(dx, numeric_grad(f, x, eps)))

    # softmax cross-entropy
    logits = rng.normal(size=(5, 2))
    labels = rng.integers(0, 2, 5)
    _, _, dl = L.softmax_cross_entropy(logits, labels)
    f = lambda: L.softmax_cross_entropy(logits, labels)[0]
    out["loss"] = rel_error(dl, numeric_grad(f, logits, eps))
    return out
