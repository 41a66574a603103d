"""Adam optimizer and the mini-batch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteLoss
from .model import Model

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, **kw) -> "OptimizerState":
        state = cls(**kw)
        state.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        state.v = {k: np.zeros_like(p) for k, p in model.params.items()}
        return state

    def hyper(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(model: Model, grads: dict[str, np.ndarray], opt: OptimizerState) -> None:
    """One bias-corrected Adam update of every non-frozen parameter, in place."""
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    lr_t = opt.learning_rate * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for name in model.trainable():
        g = grads[name]
        m = opt.m.setdefault(name, np.zeros_like(g))
        v = opt.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        model.params[name] = model.params[name] - lr_t * m / (np.sqrt(v) + opt.eps * math.sqrt(1.0 - b2**t))


def train_minibatch(model: Model, x, labels, opt: OptimizerState, rng) -> float:
    """Forward, backward and one Adam step; the model is updated in place.

    Raises NonFiniteLoss (parameters untouched) when the loss or a gradient
    is not finite.
    """
    loss, grads = model.loss_and_grads(x, labels, rng=rng, mode="train")
    if not math.isfinite(loss) or not all(np.all(np.isfinite(grads[n])) for n in model.trainable()):
        raise NonFiniteLoss(f"non-finite loss/gradient ({loss})")
    if model.trainable():
        adam_step(model, grads, opt)
    return loss


@dataclass
class FitResult:
    epoch_losses: list[float]
    steps: int
    stopped_early: bool


def fit(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    opt: OptimizerState,
    rng,
    epochs: int = 100,
    batch_size: int = 1024,
    min_delta: float = 1e-5,
    patience: int = 5,
) -> FitResult:
    """Shuffled mini-batch epochs with early stop when the best epoch loss stalls for ``patience`` epochs."""
    n = x.shape[0]
    losses: list[float] = []
    best = math.inf
    stale = 0
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            total += train_minibatch(model, x[idx], y[idx], opt, rng) * len(idx)
            steps += 1
        epoch_loss = total / max(n, 1)
        losses.append(epoch_loss)
        if epoch_loss < best - min_delta:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                return FitResult(losses, steps, True)
    return FitResult(losses, steps, False)
