"""Optimizers and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from funnet.nn.tensor import Parameter


@dataclass
class OptimizerState:
    """Hyperparameters plus one accumulator set per parameter.

    ``kind`` is ``"sgd"`` (momentum buffer only) or ``"rmsprop"`` (mean-square
    and momentum buffers).
    """

    kind: str
    lr: float
    momentum: float = 0.9
    decay: float = 0.9
    eps: float = 1e-3
    weight_decay: float = 0.0
    buffers: list[dict[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


class Optimizer:
    def __init__(self, params: list[Parameter], state: OptimizerState):
        self.params = list(params)
        self.state = state
        if not state.buffers:
            state.buffers = [{} for _ in self.params]
        if len(state.buffers) != len(self.params):
            raise ValueError("optimizer state does not match the parameter list")

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        st = self.state
        lr = st.lr if lr is None else lr
        for p, buf in zip(self.params, st.buffers):
            if not p.trainable:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if st.weight_decay:
                g = g + st.weight_decay * p.data
            if st.kind == "sgd":
                v = buf.get("momentum")
                v = g.copy() if v is None else st.momentum * v + g
                buf["momentum"] = v
                p.data -= (lr * v).astype(p.data.dtype)
            else:
                r = buf.get("square_avg")
                r = np.zeros_like(p.data) if r is None else r
                r = st.decay * r + (1.0 - st.decay) * g * g
                u = buf.get("momentum")
                u = np.zeros_like(p.data) if u is None else u
                u = st.momentum * u + lr * g / np.sqrt(r + st.eps)
                buf["square_avg"], buf["momentum"] = r, u
                p.data -= u.astype(p.data.dtype)


def rmsprop(params, lr=0.048, decay=0.9, momentum=0.9, eps=1e-3, weight_decay=1e-5) -> Optimizer:
    return Optimizer(params, OptimizerState("rmsprop", lr, momentum, decay, eps, weight_decay))


def sgd(params, lr=0.1, momentum=0.9, weight_decay=0.0) -> Optimizer:
    return Optimizer(params, OptimizerState("sgd", lr, momentum, weight_decay=weight_decay))


def lr_schedule(epoch, epochs_per_decay=2.4, decay=0.97, lr0=0.048) -> float:
    """Staircase exponential decay: ``lr0 * decay ** floor(epoch / epochs_per_decay)``.

    ``epoch`` may be fractional (``Fraction(step, steps_per_epoch)`` avoids
    float error at the decay boundaries).
    """
    e = epoch if isinstance(epoch, Fraction) else Fraction(str(epoch))
    k = math.floor(e / Fraction(str(epochs_per_decay)))
    return lr0 * decay ** k


def step_schedule(epoch, boundaries=(90, 110), values=(0.1, 0.01, 0.001)) -> float:
    """Piecewise-constant schedule (the ResFUN SGD recipe by default)."""
    for b, v in zip(boundaries, values):
        if epoch < b:
            return v
    return values[len(boundaries)]
