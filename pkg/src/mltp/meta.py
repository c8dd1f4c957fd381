"""The meta-learning training objective, its variants and the training step.

A batch is split into two tasks. The objective is the task-i loss at ``w``
plus ``eta`` times the task-j loss at ``w' = w - alpha * dC_i/dw``, where
``alpha`` holds one learnable step size per parameter group. Variants
restrict the inner step to conv or fc groups, or drop the second-order
terms from the ``w`` gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .data import Batch, TaskPair, split_task_pair
from .errors import InvalidInputError, NumericError
from .nn import ParamSet, forward, select_mask, update_running_stats
from .optim import OptimizerState, apply_update, lr_at

VARIANTS = ("standard", "mltp_full", "mltp_conv", "mltp_fc", "mltp_fo")
_DEFAULT_MASK = {"mltp_full": "all", "mltp_fo": "all", "mltp_conv": "conv_only",
                 "mltp_fc": "fc_only", "standard": "all"}


@dataclass
class AlphaSet:
    """Inner step sizes, one scalar per parameter group."""

    values: np.ndarray
    learnable: bool = True

    @classmethod
    def init(cls, n, mean=0.001, std=0.001, seed=0, learnable=True, dtype=np.float64):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(mean, std, size=n).astype(dtype), learnable)

    @classmethod
    def constant(cls, n, value, learnable=False, dtype=np.float64):
        return cls(np.full(n, value, dtype=dtype), learnable)

    def __len__(self):
        return len(self.values)

    def leaves(self):
        return [ad.Node(v, requires_grad=self.learnable, dtype=self.values.dtype)
                for v in self.values]


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "mltp_full"
    eta: float = 1.0
    beta: float = 0.0
    mask: object = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.eta < 0 or self.beta < 0:
            raise InvalidInputError("eta and beta must be non-negative")

    @property
    def second_order(self):
        return self.variant in ("mltp_full", "mltp_conv", "mltp_fc")

    def resolve_mask(self, spec):
        return select_mask(spec, _DEFAULT_MASK[self.variant] if self.mask is None else self.mask)


class MetaGrads(NamedTuple):
    value: float
    task_loss: float
    w: list
    alpha: np.ndarray | None


def _groups(params):
    if isinstance(params, ParamSet):
        return [[ad._lift(t, params.dtype) for t in g.tensors] for g in params.groups]
    return [list(g) for g in params]


def _differentiable(groups):
    # the inner gradient must exist even when the caller passes constants
    return [[t if t.requires_grad else ad.Node(t.value, requires_grad=True) for t in g]
            for g in groups]


def _alpha_nodes(alpha, dtype):
    if isinstance(alpha, AlphaSet):
        return [ad._lift(v, dtype) for v in alpha.values]
    return [a if isinstance(a, ad.Node) else ad._lift(a, dtype) for a in alpha]


def _loss(spec, logits, y):
    if spec.loss == "squared":
        return ad.squared_error(logits, y)
    return ad.softmax_cross_entropy(logits, y)


def task_loss(spec, params, batch, mode="train", seed=None, buffers=None, stats_out=None):
    """Batch-mean loss of the network at ``params`` on one task."""
    if len(batch) == 0:
        raise InvalidInputError("task batch is empty")
    if isinstance(params, ParamSet) and buffers is None:
        buffers = params.buffers
    logits = forward(spec, params, batch.x, mode=mode, seed=seed, buffers=buffers,
                     stats_out=stats_out)
    return _loss(spec, logits, batch.y)


def inner_step(params, grads, alpha, mask):
    """``w'_i = w_i - alpha_i * g_i`` for groups in ``mask``; others pass through.

    ``grads`` is aligned with the groups; entries for unmasked groups may be
    ``None``. The result stays differentiable in ``w`` and ``alpha`` as far
    as the inputs carry graph history.
    """
    groups = _groups(params)
    dtype = groups[0][0].dtype if groups and groups[0] else np.dtype(np.float64)
    alphas = _alpha_nodes(alpha, dtype)
    if len(grads) != len(groups) or len(alphas) != len(groups):
        raise InvalidInputError(f"{len(groups)} parameter groups, {len(grads)} gradient groups, "
                                f"{len(alphas)} step sizes")
    adapted = []
    for i, group in enumerate(groups):
        if i not in mask:
            adapted.append(group)
            continue
        if grads[i] is None or len(grads[i]) != len(group):
            raise InvalidInputError(f"gradient group {i} is not aligned with its parameters")
        adapted.append([w - alphas[i] * g for w, g in zip(group, grads[i])])
    return adapted


def _inner_grads(c_i, groups, mask, create_graph):
    masked = sorted(mask)
    flat = [t for gi in masked for t in groups[gi]]
    flat_grads = ad.grad(c_i, flat, create_graph=create_graph)
    grads = [None] * len(groups)
    pos = 0
    for gi in masked:
        k = len(groups[gi])
        grads[gi] = flat_grads[pos:pos + k]
        pos += k
    return grads


def _weight_flags(params, spec):
    if isinstance(params, ParamSet):
        return params.is_weight()
    if spec is not None:
        return [[n == "W" for n in names] for names, _ in spec.group_shapes()]
    return [[True] * len(g) for g in params]


def regularized_objective(objective, params, beta, spec=None):
    """``objective + beta * sum of squared weights`` (biases/batchnorm excluded)."""
    if beta < 0:
        raise InvalidInputError("beta must be non-negative")
    if beta == 0:
        return objective
    groups = _groups(params)
    penalty = None
    for group, flags in zip(groups, _weight_flags(params, spec)):
        for t, is_w in zip(group, flags):
            if is_w:
                term = ad.sum(t * t)
                penalty = term if penalty is None else penalty + term
    if penalty is None:
        return objective
    return objective + beta * penalty


def _objective(spec, groups, alphas, task_i, task_j, config, seeds, buffers, stats_out):
    mask = config.resolve_mask(spec)
    groups = _differentiable(groups)
    c_i = task_loss(spec, groups, task_i, seed=seeds[0], buffers=buffers, stats_out=stats_out)
    grads = _inner_grads(c_i, groups, mask, create_graph=config.second_order)
    adapted = inner_step(groups, grads, alphas, mask)
    c_j = task_loss(spec, adapted, task_j, seed=seeds[1], buffers=buffers)
    objective = c_i + config.eta * c_j
    return regularized_objective(objective, groups, config.beta, spec), c_i


def mltp_objective(spec, params, alpha, task_i, task_j, config, seeds=(None, None), buffers=None):
    """The two-task objective ``C(w, i) + eta * C(w', j)`` (+ weight penalty).

    For ``mltp_fo`` the inner gradient enters ``w'`` as a constant.
    """
    if config.variant == "standard":
        raise InvalidInputError("mltp_objective needs an MLTP variant")
    if isinstance(params, ParamSet) and buffers is None:
        buffers = params.buffers
    groups = _groups(params)
    alphas = _alpha_nodes(alpha, groups[0][0].dtype)
    objective, _ = _objective(spec, groups, alphas, task_i, task_j, config, seeds, buffers, None)
    return objective


def _unflatten(flat, groups):
    out, pos = [], 0
    for g in groups:
        out.append([a.value for a in flat[pos:pos + len(g)]])
        pos += len(g)
    return out


def mltp_grads(spec, params, alpha, task_i, task_j, config, seeds=(None, None), stats_out=None):
    """Gradients of the objective with respect to ``w`` and (if learnable) ``alpha``.

    The full, conv and fc variants differentiate through the inner step. The
    first-order variant holds the inner gradient constant, which leaves the
    ``alpha`` gradient exact.
    """
    if config.variant == "standard":
        raise InvalidInputError("mltp_grads needs an MLTP variant")
    groups = params.leaves()
    alphas = alpha.leaves()
    objective, c_i = _objective(spec, groups, alphas, task_i, task_j, config, seeds,
                                params.buffers, stats_out)
    flat = [t for g in groups for t in g]
    wrt = flat + (alphas if alpha.learnable else [])
    result = ad.grad(objective, wrt)
    w_grads = _unflatten(result[:len(flat)], groups)
    a_grad = np.array([g.value for g in result[len(flat):]], dtype=alpha.values.dtype) \
        if alpha.learnable else None
    return MetaGrads(objective.item(), c_i.item(), w_grads, a_grad)


def standard_grads(spec, params, batch, config, seed=None, stats_out=None):
    """Gradient of the plain batch loss (plus weight penalty)."""
    groups = params.leaves()
    loss = task_loss(spec, groups, batch, seed=seed, buffers=params.buffers, stats_out=stats_out)
    objective = regularized_objective(loss, groups, config.beta, spec)
    flat = [t for g in groups for t in g]
    result = ad.grad(objective, flat)
    return MetaGrads(objective.item(), loss.item(), _unflatten(result, groups), None)


def taylor_objective(spec, params, alpha, task_i, task_j, eta, seeds=(None, None), buffers=None):
    """First-order expansion in ``alpha`` of the two-task objective.

    ``C_i(w) + eta*C_j(w) - eta * sum_l alpha_l <grad_l C_i, grad_l C_j>``,
    with the inner products taken per parameter group at ``w``.
    """
    if isinstance(params, ParamSet) and buffers is None:
        buffers = params.buffers
    groups = _groups(params)
    groups = _differentiable(groups)
    alphas = _alpha_nodes(alpha, groups[0][0].dtype)
    flat = [t for g in groups for t in g]
    c_i = task_loss(spec, groups, task_i, seed=seeds[0], buffers=buffers)
    c_j = task_loss(spec, groups, task_j, seed=seeds[1], buffers=buffers)
    g_i = ad.grad(c_i, flat, create_graph=True)
    g_j = ad.grad(c_j, flat, create_graph=True)
    alignment = None
    pos = 0
    for gi, group in enumerate(groups):
        dot = None
        for a, b in zip(g_i[pos:pos + len(group)], g_j[pos:pos + len(group)]):
            term = ad.sum(a * b)
            dot = term if dot is None else dot + term
        pos += len(group)
        term = alphas[gi] * dot
        alignment = term if alignment is None else alignment + term
    return c_i + eta * c_j - eta * alignment


# ---------------------------------------------------------------- training step

@dataclass
class TrainState:
    spec: object
    params: ParamSet
    alpha: AlphaSet
    w_opt: OptimizerState
    alpha_opt: OptimizerState
    epoch: int = 0
    step: int = 0
    dropout_seed: int = 0
    last_objective: float = math.nan
    last_task_loss: float = math.nan


def _step_seeds(state):
    s = np.random.SeedSequence([int(state.dropout_seed) & 0xFFFFFFFF, state.step]).generate_state(2)
    return int(s[0]), int(s[1])


def train_step(state, batch, config):
    """One outer update of ``w`` (and of ``alpha`` when learnable).

    ``batch`` is a :class:`Batch` (split into two tasks for MLTP variants) or
    an explicit :class:`TaskPair`. ``alpha`` gets the same optimizer family
    and learning rate as ``w``.
    """
    lr = lr_at(state.w_opt.spec, state.epoch)
    seeds = _step_seeds(state)
    stats = {}
    if config.variant == "standard":
        if isinstance(batch, TaskPair):
            batch = Batch(np.concatenate([batch.task_i.x, batch.task_j.x]),
                          np.concatenate([batch.task_i.y, batch.task_j.y]))
        result = standard_grads(state.spec, state.params, batch, config, seed=seeds[0],
                                stats_out=stats)
    else:
        pair = batch if isinstance(batch, TaskPair) else split_task_pair(batch)
        result = mltp_grads(state.spec, state.params, state.alpha, pair.task_i, pair.task_j,
                            config, seeds=seeds, stats_out=stats)
    if not math.isfinite(result.value):
        raise NumericError(f"non-finite objective {result.value} at step {state.step}",
                           {"step": state.step, "epoch": state.epoch, "objective": result.value,
                            "task_loss": result.task_loss, "alpha": state.alpha.values.tolist()})
    flat_grads = [g for group in result.w for g in group]
    new_params = state.params.with_arrays(
        apply_update(state.w_opt, state.params.arrays(), flat_grads, lr))
    new_params.buffers = {k: dict(v) for k, v in state.params.buffers.items()}
    update_running_stats(new_params, stats)
    alpha = state.alpha
    if result.alpha is not None:
        (values,) = apply_update(state.alpha_opt, [alpha.values], [result.alpha], lr)
        alpha = replace(alpha, values=values)
    return replace(state, params=new_params, alpha=alpha, step=state.step + 1,
                   last_objective=result.value, last_task_loss=result.task_loss)
