import math

import numpy as np
import pytest

from sparsefdk.core import Geometry, GeometryError, ProjectionStack, Volume
from sparsefdk.model import FdkModel, SparseWaveletParams, forward, init_from_classical
from sparsefdk.training import (
    AdamState,
    GradPair,
    NumericalError,
    TrainConfig,
    adam_step,
    gradient,
    mse_loss,
    train,
    write_log_csv,
)


def random_instance(geom, seed, pad2x=False):
    rng = np.random.default_rng(seed)
    model = FdkModel(geom, SparseWaveletParams(rng.normal(size=(2, 2)), rng.normal(size=(2, 2))), pad2x=pad2x)
    stack = ProjectionStack(geom, rng.normal(size=geom.stack_shape))
    target = rng.uniform(0, 0.5, size=geom.volume_array_shape)
    return model, stack, target


def loss_at(model, stack, target, w, h):
    return mse_loss(forward(model.with_params(w, h), stack)[1], target)


def finite_difference_errors(model, stack, target, rel_step=1e-4):
    _, grads = gradient(model, stack, target)
    w, h = model.params.w_train, model.params.h_train
    errors = []
    for which, base, analytic in (("w", w, grads.g_w), ("h", h, grads.g_h)):
        scale = max(np.abs(base).max(), 1e-12)
        for idx in np.ndindex(base.shape):
            step = rel_step * scale
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            if which == "w":
                fd = (loss_at(model, stack, target, plus, h) - loss_at(model, stack, target, minus, h)) / (2 * step)
            else:
                fd = (loss_at(model, stack, target, w, plus) - loss_at(model, stack, target, w, minus)) / (2 * step)
            errors.append(abs(analytic[idx] - fd) / max(abs(fd), abs(analytic[idx]), 1e-300))
    return errors


def test_mse_examples(rng):
    a = rng.normal(size=(4, 4, 4))
    assert mse_loss(a, a) == 0.0
    assert mse_loss(a + 2.0, a) == pytest.approx(4.0, rel=1e-12)
    b = rng.normal(size=(4, 4, 4))
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    assert mse_loss(Volume(a, (1, 1, 1)), Volume(b, (1, 1, 1))) == pytest.approx(total / 64, rel=1e-12)
    with pytest.raises(GeometryError):
        mse_loss(a, b[:2])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(tiny_geom, seed):
    model, stack, target = random_instance(tiny_geom, seed)
    assert max(finite_difference_errors(model, stack, target)) <= 1e-3


def test_gradient_matches_finite_differences_padded(tiny_geom):
    model, stack, target = random_instance(tiny_geom, 7, pad2x=True)
    assert max(finite_difference_errors(model, stack, target)) <= 1e-3


def _positive_case(geom, rng):
    # all-positive field: positive projections, positive weights, all-pass filter
    model = FdkModel(geom, SparseWaveletParams(np.full((2, 2), 4.0), np.full((2, 2), 4.0)))
    stack = ProjectionStack(geom, rng.uniform(0.5, 1.0, size=geom.stack_shape))
    pre, out = forward(model, stack)
    assert pre.data.min() > 0
    return model, stack, out.data


def test_zero_residual_gives_zero_gradient(tiny_geom, rng):
    model, stack, out = _positive_case(tiny_geom, rng)
    loss, grads = gradient(model, stack, out)
    assert loss == 0.0
    assert not grads.g_w.any() and not grads.g_h.any()


def test_gradient_scales_with_residual(tiny_geom, rng):
    model, stack, out = _positive_case(tiny_geom, rng)
    delta = rng.normal(size=out.shape)
    _, g1 = gradient(model, stack, out - delta)
    _, g3 = gradient(model, stack, out - 3.0 * delta)
    np.testing.assert_allclose(g3.g_w, 3.0 * g1.g_w, rtol=1e-10)
    np.testing.assert_allclose(g3.g_h, 3.0 * g1.g_h, rtol=1e-10)


def test_w_gradient_invariant_to_view_permutation(tiny_geom):
    # views m and m + 4 sit half a turn apart, so swapping the two 4-view blocks of the stack (and the
    # two rows of h_train) is the same acquisition as the original one with the object turned by 180
    # degrees about z; the sum over views in the weight gradient must not care about the order
    model, stack, target = random_instance(tiny_geom, 3)
    _, base = gradient(model, stack, target)
    swapped = model.with_params(model.params.w_train, model.params.h_train[::-1])
    perm = np.r_[4:8, 0:4]
    _, got = gradient(swapped, ProjectionStack(tiny_geom, stack.data[perm]), target[:, ::-1, ::-1])
    np.testing.assert_allclose(got.g_w, base.g_w, rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(got.g_h, base.g_h[::-1], rtol=1e-9, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises(tiny_geom, rng):
    model = init_from_classical(tiny_geom)
    stack = ProjectionStack(tiny_geom, rng.normal(size=tiny_geom.stack_shape))
    with pytest.raises(NumericalError):
        gradient(model.with_params(model.params.w_train * 1e300, model.params.h_train * 1e300), stack,
                 np.zeros(tiny_geom.volume_array_shape))


def test_adam_first_step_is_signed_lr():
    cfg = TrainConfig()
    w = np.array([[1.0, -2.0]])
    h = np.array([[0.5]])
    g = GradPair(np.array([[3.0, -0.25]]), np.array([[-7.0]]))
    (w2, h2), state = adam_step((w, h), g, AdamState.zeros_like(w, h), cfg)
    np.testing.assert_allclose(w2 - w, [[-1e-3, 1e-3]], rtol=1e-6)
    np.testing.assert_allclose(h2 - h, [[1e-3]], rtol=1e-6)
    assert state.t == 1


def test_adam_zero_gradient():
    cfg = TrainConfig()
    w, h = np.ones((1, 1)), np.ones((1, 1))
    state = AdamState(np.full((1, 1), 0.2), np.full((1, 1), 0.04), np.zeros((1, 1)), np.zeros((1, 1)), 5)
    (w2, h2), new = adam_step((w, h), GradPair(np.zeros((1, 1)), np.zeros((1, 1))), state, cfg)
    assert new.m_w[0, 0] == pytest.approx(0.18)
    assert new.v_w[0, 0] == pytest.approx(0.04 * 0.999)
    assert h2[0, 0] == 1.0
    # the decayed first moment still moves w
    assert w2[0, 0] < 1.0


def test_adam_hand_trace_on_quadratic():
    # f(x) = (x - 3)^2 from x = 0, lr 0.1; reference trace computed by hand with the textbook update
    cfg = TrainConfig(learning_rate=0.1)
    x = np.array([[0.0]])
    state = AdamState.zeros_like(x, np.zeros((1, 1)))
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    ref = 0.0
    for t in (1, 2, 3):
        g = 2 * (ref - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - 0.1 * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        (x, _), state = adam_step((x, np.zeros((1, 1))), GradPair(2 * (x - 3), np.zeros((1, 1))), state, cfg)
        assert x[0, 0] == pytest.approx(ref, rel=1e-14)
    # the trace itself: 0.1, ~0.19996, ~0.29986
    assert x[0, 0] == pytest.approx(0.2998, abs=2e-4)


def _tiny_data(geom, n, seed):
    rng = np.random.default_rng(seed)
    return [(ProjectionStack(geom, rng.uniform(0, 1, size=geom.stack_shape)),
             Volume(rng.uniform(0, 0.1, size=geom.volume_array_shape), geom.vol_spacing)) for _ in range(n)]


def test_zero_lr_is_identity(tiny_geom):
    model = init_from_classical(tiny_geom)
    res = train(model, _tiny_data(tiny_geom, 2, 0), [], TrainConfig(epochs=3, learning_rate=0.0))
    assert np.array_equal(res.model.params.w_train, model.params.w_train)
    assert np.array_equal(res.model.params.h_train, model.params.h_train)


def test_small_lr_monotone_first_epoch(tiny_geom):
    model = init_from_classical(tiny_geom)
    data = _tiny_data(tiny_geom, 1, 1)
    losses = []
    w, h = model.params.w_train, model.params.h_train
    state = AdamState.zeros_like(w, h)
    cfg = TrainConfig(learning_rate=1e-6)
    for _ in range(10):
        loss, g = gradient(model.with_params(w, h), *data[0])
        losses.append(loss)
        (w, h), state = adam_step((w, h), g, state, cfg)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    res = train(model, data, [], TrainConfig(epochs=1, learning_rate=1e-6))
    assert res.log[0].train_loss == losses[0]


def test_already_optimal_sample_stays_put(tiny_geom, rng):
    model, stack, out = _positive_case(tiny_geom, rng)
    res = train(model, [(stack, Volume(out, tiny_geom.vol_spacing))], [], TrainConfig(epochs=2))
    assert all(r.train_loss == 0.0 for r in res.log)
    assert np.array_equal(res.model.params.w_train, model.params.w_train)
    assert np.array_equal(res.model.params.h_train, model.params.h_train)


def test_log_structure_and_determinism(tiny_geom, tmp_path):
    model = init_from_classical(tiny_geom)
    data, val = _tiny_data(tiny_geom, 3, 2), _tiny_data(tiny_geom, 1, 3)
    runs = []
    for k in range(2):
        res = train(model, data, val, TrainConfig(epochs=3, seed=11))
        write_log_csv(tmp_path / f"log{k}.csv", res.log)
        runs.append((tmp_path / f"log{k}.csv").read_bytes())
    assert runs[0] == runs[1]
    lines = runs[0].decode().splitlines()
    assert lines[0] == "epoch,sample_index,train_loss,val_loss"
    assert len(lines) == 1 + 9
    rows = [line.split(",") for line in lines[1:]]
    assert [r[3] != "" for r in rows] == [False, False, True] * 3
    for epoch in range(3):
        assert sorted(int(r[1]) for r in rows[3 * epoch: 3 * epoch + 3]) == [0, 1, 2]


def test_best_validation_checkpoint(tiny_geom):
    model = init_from_classical(tiny_geom)
    data, val = _tiny_data(tiny_geom, 2, 4), _tiny_data(tiny_geom, 1, 5)
    res = train(model, data, val, TrainConfig(epochs=4, learning_rate=0.01))
    vals = [r.val_loss for r in res.log if r.val_loss is not None]
    assert res.best_val_loss == min(vals)
    assert res.best_epoch == vals.index(min(vals)) + 1


def test_geometry_mismatch_rejected(tiny_geom):
    other = Geometry(8, 2 * math.pi, 21.0, 40.0, (8, 8), (2.0, 2.0), (8, 8, 8), (1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        train(init_from_classical(tiny_geom), _tiny_data(other, 1, 0), [])
    with pytest.raises(ValueError):
        train(init_from_classical(tiny_geom), [], [])
