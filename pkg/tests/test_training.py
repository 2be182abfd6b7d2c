import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.core_math import make_rng
from collapse_lab.errors import InputError, NumericError, ShapeError
from collapse_lab.model import BNMode, ModelConfig, forward, init_model
from collapse_lab.training import (TrainConfig, clip_gradients, cross_entropy, gradients, per_sample_gradients,
                                   per_sample_gradients_all, per_sample_losses, sgd_step, train)

TINY = ModelConfig(input_dim=3, width=4, depth=2, num_classes=3)


def tiny_model(seed=0):
    m = init_model(TINY, make_rng(seed, "init"))
    rng = make_rng(seed, "perturb")
    for norm in m.bn:
        norm.gamma = rng.uniform(0.5, 1.5, 4)
        norm.beta = rng.normal(size=4) * 0.3
        norm.running_mean = rng.normal(size=4) * 0.2
        norm.running_var = rng.uniform(0.5, 2.0, 4)
    for layer in m.dense:
        layer.bias = rng.normal(size=layer.bias.shape) * 0.1
    return m


def tiny_data(n=6, seed=0):
    rng = make_rng(seed, "data")
    return rng.normal(size=(n, 3)), rng.integers(0, 3, n)


# --- loss ---------------------------------------------------------------------------

def test_uniform_logits_give_log_c():
    assert cross_entropy(np.zeros((5, 7)), np.arange(5)) == pytest.approx(math.log(7), abs=1e-15)


def test_saturated_logit():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    assert cross_entropy(logits, [2]) < 1e-20


def test_batch_loss_is_mean_of_per_sample_losses():
    rng = make_rng(0)
    logits = rng.normal(size=(9, 4)) * 5
    labels = rng.integers(0, 4, 9)
    assert cross_entropy(logits, labels) == pytest.approx(per_sample_losses(logits, labels).mean(), rel=1e-15)


def test_extreme_logits_stay_finite():
    logits = np.array([[1e4, -1e4], [-1e4, 1e4]])
    assert np.isfinite(cross_entropy(logits, [1, 0]))


def test_bad_labels():
    with pytest.raises(InputError):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((2, 3)), [0])


# --- per-sample gradients ------------------------------------------------------------------

def test_softmax_closed_form():
    m = init_model(ModelConfig(input_dim=2, width=2, depth=1, num_classes=2), make_rng(0))
    for layer in m.dense:
        layer.weight[:] = 0.0
    stack = per_sample_gradients(m, np.array([[1.0, 0.0]]), [0], block=1)
    assert np.array_equal(stack.rows[0, -2:], [-0.5, 0.5])
    assert not stack.rows[0, :-2].any()


@pytest.mark.parametrize("block", [0, 1, 2])
def test_rows_average_to_batch_gradient(block):
    m = tiny_model(1)
    x, y = tiny_data(11, 1)
    stack = per_sample_gradients(m, x, y, block)
    _, grads = gradients(m, x, y, BNMode.RUNNING_STATS)
    batch = np.concatenate([grads[f"dense.{block}.weight"].ravel(), grads[f"dense.{block}.bias"]])
    assert stack.n == 11
    assert np.abs(stack.rows.mean(axis=0) - batch).max() < 1e-12


def finite_difference_rows(model, x, y, block, h=1e-5):
    theta = model.block_vector(block)
    rows = np.empty((x.shape[0], theta.size))
    for j in range(theta.size):
        for sign, store in ((1, "plus"), (-1, "minus")):
            probe = model.copy()
            t = theta.copy()
            t[j] += sign * h
            probe.set_block_vector(block, t)
            losses = per_sample_losses(forward(probe, x)[0], y)
            if store == "plus":
                plus = losses
            else:
                minus = losses
        rows[:, j] = (plus - minus) / (2 * h)
    return rows


def test_per_sample_gradients_match_finite_differences():
    m = tiny_model(2)
    assert m.num_prunable <= 1000
    x, y = tiny_data(4, 2)
    stacks = per_sample_gradients_all(m, x, y)
    worst = 0.0
    for block, stack in stacks.items():
        fd = finite_difference_rows(m, x, y, block)
        scale = np.maximum(np.abs(fd), np.abs(stack.rows))
        significant = scale > 1e-7
        rel = np.abs(stack.rows - fd)[significant] / scale[significant]
        worst = max(worst, float(rel.max()))
        # entries too small for a meaningful relative error are checked absolutely
        assert np.abs(stack.rows - fd)[~significant].max(initial=0.0) < 1e-12
    assert worst < 1e-6


def test_training_mode_gradient_matches_finite_differences():
    m = tiny_model(3)
    x, y = tiny_data(6, 3)

    def loss_at(model):
        return cross_entropy(forward(model.copy(), x, BNMode.TRAINING_STATS)[0], y)

    _, grads = gradients(m.copy(), x, y, BNMode.TRAINING_STATS)
    h = 1e-5
    for name in ("dense.0.weight", "bn.1.gamma", "bn.0.beta", "dense.2.bias"):
        value = m.parameters()[name]
        for idx in np.ndindex(value.shape):
            plus, minus = m.copy(), m.copy()
            vp, vm = value.copy(), value.copy()
            vp[idx] += h
            vm[idx] -= h
            plus.set_parameter(name, vp)
            minus.set_parameter(name, vm)
            fd = (loss_at(plus) - loss_at(minus)) / (2 * h)
            assert abs(grads[name][idx] - fd) <= 1e-6 * max(abs(fd), 1e-4)


def test_unknown_block_is_an_input_error():
    m = tiny_model()
    x, y = tiny_data()
    with pytest.raises(InputError):
        per_sample_gradients(m, x, y, 3)


# --- SGD ------------------------------------------------------------------------------------

def some_grads(model, seed=0):
    rng = make_rng(seed, "g")
    return {k: rng.normal(size=v.shape) for k, v in model.parameters().items()}


def test_zero_learning_rate_leaves_parameters():
    m = tiny_model()
    out, _ = sgd_step(m, some_grads(m), 0.0, 0.9)
    for k, v in m.parameters().items():
        assert np.array_equal(out.parameters()[k], v)


def test_plain_sgd_step():
    m = tiny_model()
    g = some_grads(m)
    out, _ = sgd_step(m, g, 0.1, 0.0)
    for k, v in m.parameters().items():
        assert np.array_equal(out.parameters()[k], v - 0.1 * g[k])


def test_momentum_recurrence():
    m = tiny_model()
    g1, g2 = some_grads(m, 1), some_grads(m, 2)
    m1, v1 = sgd_step(m, g1, 0.1, 0.9)
    _, v2 = sgd_step(m1, g2, 0.1, 0.9, v1)
    for k in g1:
        assert np.array_equal(v2[k], 0.9 * g1[k] + g2[k])


def test_step_leaves_running_stats():
    m = tiny_model()
    out, _ = sgd_step(m, some_grads(m), 0.5, 0.9)
    for a, b in zip(m.bn, out.bn):
        assert np.array_equal(a.running_mean, b.running_mean)
        assert np.array_equal(a.running_var, b.running_var)


def test_step_shape_mismatch():
    m = tiny_model()
    with pytest.raises(ShapeError):
        sgd_step(m, {"dense.0.weight": np.zeros((2, 2))}, 0.1, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 10.0), st.integers(0, 1000))
def test_clipping_bounds_global_norm(max_norm, seed):
    m = tiny_model()
    g = {k: v * 10 for k, v in some_grads(m, seed).items()}
    clipped = clip_gradients(g, max_norm)
    norm = np.sqrt(sum((v**2).sum() for v in clipped.values()))
    original = np.sqrt(sum((v**2).sum() for v in g.values()))
    assert norm <= max_norm * (1 + 1e-12) or np.isclose(norm, original)


# --- training loop ----------------------------------------------------------------------------

def test_zero_epochs_is_identity():
    m = tiny_model()
    x, y = tiny_data(20)
    out, history = train(m, x, y, TrainConfig(epochs=0))
    assert history.records == []
    for k, v in m.parameters().items():
        assert np.array_equal(out.parameters()[k], v)


def test_training_is_deterministic_and_does_not_touch_input():
    m = tiny_model()
    snapshot = m.copy()
    x, y = tiny_data(40)
    cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
    a, ha = train(m, x, y, cfg)
    b, hb = train(m, x, y, cfg)
    for k, v in a.parameters().items():
        assert np.array_equal(b.parameters()[k], v)
        assert np.array_equal(m.parameters()[k], snapshot.parameters()[k])
    assert [r.loss for r in ha.records] == [r.loss for r in hb.records]
    assert len(ha.records) == 3


def test_training_reduces_loss():
    x, y = tiny_data(60, 4)
    x = x + 3 * np.eye(3)[y]
    _, history = train(tiny_model(4), x, y, TrainConfig(epochs=15, batch_size=16, learning_rate=0.05))
    assert history.records[-1].loss < history.records[0].loss


def test_empty_dataset():
    with pytest.raises(InputError):
        train(tiny_model(), np.zeros((0, 3)), np.zeros(0, dtype=int), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_a_numeric_error():
    x, y = tiny_data(32)
    with pytest.raises(NumericError):
        train(tiny_model(), x, y, TrainConfig(epochs=5, batch_size=8, learning_rate=1e300, grad_clip=None))
