import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mltp import autodiff as ad
from mltp import nn
from mltp.data import Batch, TaskPair
from mltp.errors import InvalidInputError, NumericError
from mltp.gradcheck import finite_diff_grad, max_relative_error
from mltp.meta import (AlphaSet, ObjectiveConfig, TrainState, inner_step, mltp_grads,
                       mltp_objective, regularized_objective, taylor_objective, task_loss,
                       train_step)
from mltp.optim import OptimizerSpec, OptimizerState

from _models import alpha_for, random_pair, scalar_quadratic, small_cnn, small_mlp

FULL = ObjectiveConfig("mltp_full", 1.0)
FO = ObjectiveConfig("mltp_fo", 1.0)


def quad_alpha(value=0.1, learnable=True):
    return AlphaSet(np.array([value]), learnable)


# ---------------------------------------------------------------- scalar quadratic

def test_task_loss_scalar_and_uniform():
    spec, params, task_i, _ = scalar_quadratic()
    assert task_loss(spec, params, task_i).item() == 1.0
    mlp = small_mlp(classes=4)
    zero = nn.init_params(mlp, ("normal", 0.0, 0.0))
    batch = Batch(np.random.default_rng(0).standard_normal((5, 4)), np.arange(5) % 4)
    assert task_loss(mlp, zero, batch).item() == pytest.approx(math.log(4), abs=1e-12)


def test_identical_samples_same_as_single():
    spec = small_mlp()
    p = nn.init_params(spec, seed=1)
    x = np.random.default_rng(1).standard_normal((1, 4))
    one = task_loss(spec, p, Batch(x, np.array([2]))).item()
    many = task_loss(spec, p, Batch(np.repeat(x, 6, axis=0), np.full(6, 2))).item()
    assert many == pytest.approx(one, abs=1e-14)


def test_inner_step_scalar_and_zero_alpha():
    _, params, _, _ = scalar_quadratic()
    (w,) = params.arrays()
    adapted = inner_step(params, [[ad.Node(np.array([[2.0]]))]], quad_alpha(0.1), {0})
    assert adapted[0][0].item() == pytest.approx(1.8, abs=1e-15)
    same = inner_step(params, [[ad.Node(np.array([[2.0]]))]], quad_alpha(0.0), {0})
    assert same[0][0].value.tobytes() == w.tobytes()
    with pytest.raises(InvalidInputError):
        inner_step(params, [], quad_alpha(0.1), {0})


def test_scalar_quadratic_objective_and_grads():
    spec, params, ti, tj = scalar_quadratic()
    assert mltp_objective(spec, params, quad_alpha(), ti, tj, FULL).item() == pytest.approx(13.96, abs=1e-10)
    full = mltp_grads(spec, params, quad_alpha(), ti, tj, FULL)
    fo = mltp_grads(spec, params, quad_alpha(), ti, tj, FO)
    assert full.w[0][0].item() == pytest.approx(13.52, abs=1e-10)
    assert fo.w[0][0].item() == pytest.approx(16.4, abs=1e-10)
    assert full.alpha[0] == pytest.approx(-28.8, abs=1e-10)
    assert fo.alpha[0] == full.alpha[0]
    fixed = mltp_grads(spec, params, quad_alpha(learnable=False), ti, tj, FULL)
    assert fixed.alpha is None


@given(st.floats(-0.5, 0.5))
@settings(max_examples=40, deadline=None)
def test_scalar_quadratic_closed_forms(a):
    # C_i = (w-1)^2, C_j = 4 w'^2, w' = w - 2a(w-1); at w=2: w' = 2-2a
    spec, params, ti, tj = scalar_quadratic()
    full = mltp_grads(spec, params, quad_alpha(a), ti, tj, FULL)
    wp = 2 - 2 * a
    assert full.value == pytest.approx(1 + 4 * wp ** 2, abs=1e-10)
    assert full.w[0][0].item() == pytest.approx(2 + 8 * wp * (1 - 2 * a), abs=1e-10)
    assert full.alpha[0] == pytest.approx(8 * wp * -2, abs=1e-10)
    taylor = taylor_objective(spec, params, quad_alpha(a), ti, tj, 1.0).item()
    assert taylor == pytest.approx(17 - 32 * a, abs=1e-10)
    assert abs(full.value - taylor) == pytest.approx(16 * a * a, abs=1e-10)


def test_eta_zero_and_alpha_zero():
    spec, params, ti, tj = scalar_quadratic()
    j0 = mltp_objective(spec, params, quad_alpha(), ti, tj, ObjectiveConfig("mltp_full", 0.0)).item()
    assert j0 == task_loss(spec, params, ti).item()
    ja = mltp_objective(spec, params, quad_alpha(0.0), ti, tj, ObjectiveConfig("mltp_full", 0.5)).item()
    assert ja == 1.0 + 0.5 * 16.0


def test_taylor_orthogonal_gradients():
    # two inputs touching disjoint weights: gradients on the two tasks are orthogonal
    spec = nn.NetworkSpec((nn.LayerSpec("fc", units=1, activation="none", bias=False),), (2,), 1,
                          loss="squared")
    params = nn.init_params(spec, ("normal", 0.5, 0.0))
    ti = Batch(np.array([[1.0, 0.0]]), np.array([[2.0]]))
    tj = Batch(np.array([[0.0, 1.0]]), np.array([[-1.0]]))
    t = taylor_objective(spec, params, quad_alpha(0.3), ti, tj, 0.7).item()
    assert t == task_loss(spec, params, ti).item() + 0.7 * task_loss(spec, params, tj).item()


def test_regularized_objective():
    spec, params, _, _ = scalar_quadratic()
    p3 = params.with_arrays([np.array([[3.0]])])
    base = ad.Node(np.array(1.5))
    assert regularized_objective(base, p3, 0.0) is base
    assert regularized_objective(base, p3, 0.1).item() == pytest.approx(2.4)
    with pytest.raises(InvalidInputError):
        regularized_objective(base, p3, -1.0)


def test_regularizer_gradient_and_bias_exclusion():
    spec = small_mlp()
    p = nn.init_params(spec, seed=0)
    leaves = p.leaves()
    zero = ad.Node(np.array(0.0))
    reg = regularized_objective(zero, leaves, 0.05, spec)
    flat = [t for g in leaves for t in g]
    grads = ad.grad(reg, flat)
    expected = [2 * 0.05 * a if n == "W" else np.zeros_like(a)
                for g in p.groups for n, a in zip(g.names, g.tensors)]
    assert all(np.allclose(g.value, e, atol=0, rtol=1e-14) for g, e in zip(grads, expected))
    numeric = finite_diff_grad(lambda q: regularized_objective(zero, q, 0.05).item(), p)
    assert max_relative_error([g.value for g in grads], numeric) < 1e-8


# ---------------------------------------------------------------- masking and variants

@pytest.mark.parametrize("variant,changed", [("mltp_conv", {0}), ("mltp_fc", {1})])
def test_masked_inner_step_bitwise(variant, changed):
    spec = small_cnn()
    params = nn.init_params(spec, seed=0)
    pair = random_pair(spec)
    config = ObjectiveConfig(variant)
    mask = config.resolve_mask(spec)
    assert mask == changed
    groups = params.leaves()
    loss = task_loss(spec, groups, pair.task_i)
    grads = ad.grad(loss, [t for g in groups for t in g])
    gg = [grads[0:2], grads[2:4]]
    adapted = inner_step(groups, gg, alpha_for(params), mask)
    for gi, (a, w) in enumerate(zip(adapted, params.groups)):
        for t, ref in zip(a, w.tensors):
            assert (t.value.tobytes() == ref.tobytes()) == (gi not in changed)


def test_masked_variants_only_give_alpha_gradient_to_masked_groups():
    spec = small_cnn()
    params = nn.init_params(spec, seed=0)
    pair = random_pair(spec)
    conv = mltp_grads(spec, params, alpha_for(params), pair.task_i, pair.task_j,
                      ObjectiveConfig("mltp_conv"))
    assert conv.alpha[1] == 0.0 and conv.alpha[0] != 0.0


def test_explicit_mask_overrides_default():
    spec = small_mlp((5, 5))
    assert ObjectiveConfig("mltp_full", mask=[1]).resolve_mask(spec) == {1}
    with pytest.raises(InvalidInputError):
        ObjectiveConfig("mltp_bogus")
    with pytest.raises(InvalidInputError):
        ObjectiveConfig("mltp_full", eta=-1.0)


def test_zero_alpha_full_and_fo_agree():
    spec = small_mlp()
    params = nn.init_params(spec, seed=1)
    pair = random_pair(spec, seed=1)
    a = AlphaSet.constant(len(params), 0.0, learnable=True)
    full = mltp_grads(spec, params, a, pair.task_i, pair.task_j, FULL)
    fo = mltp_grads(spec, params, a, pair.task_i, pair.task_j, FO)
    for g1, g2 in zip(full.w, fo.w):
        for u, v in zip(g1, g2):
            assert np.array_equal(u, v)
    assert np.array_equal(full.alpha, fo.alpha)


def test_alpha_gradient_identity():
    # dJ/dalpha_l = -eta * sum <dC_j/dw'_l, g_l>
    spec = small_mlp(activation="tanh")
    params = nn.init_params(spec, seed=2)
    pair = random_pair(spec, seed=2)
    alpha = alpha_for(params)
    eta = 0.7
    res = mltp_grads(spec, params, alpha, pair.task_i, pair.task_j, ObjectiveConfig("mltp_full", eta))
    leaves = params.leaves()
    flat = [t for g in leaves for t in g]
    g_i = ad.grad(task_loss(spec, leaves, pair.task_i), flat)
    adapted, pos = [], 0
    for gi, g in enumerate(leaves):
        adapted.append([w.value - alpha.values[gi] * gr.value for w, gr in zip(g, g_i[pos:pos + len(g)])])
        pos += len(g)
    ad_leaves = [[ad.Node(a, requires_grad=True) for a in g] for g in adapted]
    g_j = ad.grad(task_loss(spec, ad_leaves, pair.task_j), [t for g in ad_leaves for t in g])
    pos = 0
    for gi, g in enumerate(leaves):
        k = len(g)
        expected = -eta * sum(np.sum(a.value * b.value) for a, b in zip(g_j[pos:pos + k], g_i[pos:pos + k]))
        assert res.alpha[gi] == pytest.approx(expected, rel=1e-10, abs=1e-14)
        pos += k


def test_variant_standard_rejected_by_meta_functions():
    spec, params, ti, tj = scalar_quadratic()
    with pytest.raises(InvalidInputError):
        mltp_objective(spec, params, quad_alpha(), ti, tj, ObjectiveConfig("standard"))


# ---------------------------------------------------------------- training step

def _state(spec, params, alpha, kind="sgd", lr=0.01):
    opt = OptimizerSpec(kind, lr)
    return TrainState(spec, params, alpha, OptimizerState(opt), OptimizerState(opt))


def test_train_step_scalar_quadratic_sgd():
    spec, params, ti, tj = scalar_quadratic()
    state = train_step(_state(spec, params, quad_alpha()), TaskPair(ti, tj), FULL)
    assert state.params.arrays()[0].item() == pytest.approx(1.8648, abs=1e-12)
    assert state.alpha.values[0] == pytest.approx(0.388, abs=1e-12)
    assert state.step == 1


def test_train_step_standard_is_plain_sgd():
    spec = small_mlp()
    params = nn.init_params(spec, seed=0)
    rng = np.random.default_rng(0)
    batch = Batch(rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
    state = train_step(_state(spec, params, alpha_for(params), lr=0.1), batch, ObjectiveConfig("standard"))
    leaves = params.leaves()
    grads = ad.grad(task_loss(spec, leaves, batch, seed=None), [t for g in leaves for t in g])
    for new, old, g in zip(state.params.arrays(), params.arrays(), grads):
        assert np.allclose(new, old - 0.1 * g.value, rtol=0, atol=1e-15)


def test_fixed_alpha_never_moves():
    spec = small_mlp()
    params = nn.init_params(spec, seed=0)
    alpha = alpha_for(params, learnable=False)
    state = _state(spec, params, alpha, "adam", 1e-2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        state = train_step(state, Batch(rng.standard_normal((8, 4)), rng.integers(0, 3, 8)), FULL)
    assert np.array_equal(state.alpha.values, alpha.values)


def test_objective_decreases_on_scalar_quadratic():
    spec, params, ti, tj = scalar_quadratic()
    state = _state(spec, params, quad_alpha())
    pair = TaskPair(ti, tj)
    values = [mltp_objective(spec, state.params, state.alpha, ti, tj, FULL).item()]
    for _ in range(10):
        state = train_step(state, pair, FULL)
        values.append(mltp_objective(spec, state.params, state.alpha, ti, tj, FULL).item())
    assert all(b < a for a, b in zip(values, values[1:]))


def test_non_finite_objective_aborts():
    spec, params, ti, tj = scalar_quadratic()
    bad = TaskPair(ti, Batch(np.array([[np.inf]]), np.array([[0.0]])))
    with pytest.raises(NumericError) as info, np.errstate(invalid="ignore"):
        train_step(_state(spec, params, quad_alpha()), bad, FULL)
    assert "step" in info.value.diagnostics
