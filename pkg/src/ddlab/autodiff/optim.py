"""First-order optimizers: SGD with momentum and AdamW."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 3e-4
    weight_decay: float = 0.0
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _param_name(p, i):
    return getattr(p, "name", None) or f"param[{i}]"


def optimizer_step(state, params, grads=None):
    """Apply one update in place. ``grads`` defaults to each param's ``.grad``.

    A ``None`` gradient counts as zero.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = list(grads)
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} grads for {len(params)} params")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape} for {_param_name(p, i)}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {_param_name(p, i)}")

    if not state.buffers:
        nbuf = 2 if state.kind == "adamw" else (1 if state.momentum else 0)
        state.buffers = [[np.zeros(p.data.shape) for _ in range(nbuf)] for p in params]
    elif len(state.buffers) != len(params):
        raise ValueError("optimizer state was created for a different parameter list")

    state.step += 1
    lr, wd = state.lr, state.weight_decay
    if state.kind == "sgd-momentum":
        for p, g, buf in zip(params, grads, state.buffers):
            g = np.zeros(p.data.shape) if g is None else g
            if wd:
                g = g + wd * p.data
            if buf:
                buf[0] *= state.momentum
                buf[0] += g
                g = buf[0]
            p.data -= lr * g
        return

    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, (m, v) in zip(params, grads, state.buffers):
        g = np.zeros(p.data.shape) if g is None else g
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(base, step, total, floor=0.0):
    """Cosine decay from ``base`` at step 0 to ``floor`` at ``total``."""
    if total <= 1:
        return base
    frac = min(step, total - 1) / (total - 1)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))
