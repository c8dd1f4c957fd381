"""Outer-loop optimizers (SGD, momentum, Adam) and step learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericError

KINDS = ("sgd", "momentum", "adam")


@dataclass(frozen=True)
class OptimizerSpec:
    """Optimizer family, base learning rate and milestone schedule.

    ``schedule`` holds ``(epoch, factor)`` pairs; the learning rate at an
    epoch is ``lr`` times every factor whose milestone is <= that epoch.
    """

    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        sched = tuple((int(m), float(f)) for m, f in self.schedule)
        object.__setattr__(self, "schedule", sched)
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        milestones = [m for m, _ in sched]
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise InvalidInputError("schedule milestones must be strictly increasing")
        if any(f <= 0 for _, f in sched):
            raise InvalidInputError("schedule factors must be positive")


def lr_at(spec, epoch):
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")
    lr = spec.lr
    for milestone, factor in spec.schedule:
        if milestone <= epoch:
            lr *= factor
    return lr


@dataclass
class OptimizerState:
    """Per-tensor moment buffers and the step count of one optimizer."""

    spec: OptimizerSpec
    step: int = 0
    buffers: list = field(default_factory=list)


def apply_update(state, values, grads, lr):
    """One optimizer step; returns new arrays and advances ``state``.

    sgd: ``θ - lr·g``. momentum: ``v = μv + g; θ - lr·v``. adam: bias-corrected
    first/second moments with ``θ - lr·m̂/(√v̂ + ε)``.
    """
    values = [np.asarray(v) for v in values]
    grads = [np.asarray(g) for g in grads]
    if len(values) != len(grads):
        raise InvalidInputError("values and gradients are not aligned")
    for i, (v, g) in enumerate(zip(values, grads)):
        if v.shape != g.shape:
            raise InvalidInputError(f"tensor {i}: shape {v.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", {"tensor": i, "step": state.step})
    spec = state.spec
    if not state.buffers:
        if spec.kind == "momentum":
            state.buffers = [np.zeros_like(v) for v in values]
        elif spec.kind == "adam":
            state.buffers = [(np.zeros_like(v), np.zeros_like(v)) for v in values]
    state.step += 1
    out = []
    if spec.kind == "sgd":
        for v, g in zip(values, grads):
            out.append(v - v.dtype.type(lr) * g)
    elif spec.kind == "momentum":
        mu = spec.momentum
        for i, (v, g) in enumerate(zip(values, grads)):
            buf = state.buffers[i] * v.dtype.type(mu) + g
            state.buffers[i] = buf
            out.append(v - v.dtype.type(lr) * buf)
    else:
        b1, b2 = spec.betas
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        for i, (v, g) in enumerate(zip(values, grads)):
            m, s = state.buffers[i]
            t = v.dtype.type
            m = t(b1) * m + t(1.0 - b1) * g
            s = t(b2) * s + t(1.0 - b2) * (g * g)
            state.buffers[i] = (m, s)
            m_hat = m / t(c1)
            s_hat = s / t(c2)
            out.append(v - t(lr) * m_hat / (np.sqrt(s_hat) + t(spec.eps)))
    return out
