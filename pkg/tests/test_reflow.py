import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.core_math import StreamingStats, make_rng, stats_accumulate
from collapse_lab.datasets import gen_blobs
from collapse_lab.diagnostics import variance_ratio_report
from collapse_lab.errors import ConfigError, InputError
from collapse_lab.model import ModelConfig, accuracy, forward, init_model
from collapse_lab.pruning import prune_pipeline
from collapse_lab.reflow import (CalibrationMode, CalibrationSpec, RecalibratedStats, apply_reflow,
                                 calibration_batches, collect_bn_stats, layerwise_recalibration_sweep, reflow,
                                 steps_to_fraction_of_gain, sweep_order)
from collapse_lab.training import TrainConfig, train

FROZEN = CalibrationMode.FROZEN_UPSTREAM
SMALL = ModelConfig(input_dim=4, width=6, depth=3, num_classes=3)


def identity_model():
    """One unit whose pre-BN value is the input itself."""
    m = init_model(ModelConfig(input_dim=1, width=1, depth=1, num_classes=2), make_rng(0))
    m.dense[0].weight[:] = 1.0
    return m


def same_except_running_stats(a, b):
    for la, lb in zip(a.dense, b.dense):
        assert np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)
    for na, nb in zip(a.bn, b.bn):
        assert np.array_equal(na.gamma, nb.gamma) and np.array_equal(na.beta, nb.beta)


@pytest.fixture(scope="module")
def trained():
    train_set = gen_blobs(100, 3, 4, 6.0, 1.0, seed=3)
    eval_set = gen_blobs(30, 3, 4, 6.0, 1.0, seed=3, split="eval")
    m = init_model(ModelConfig(input_dim=4, width=12, depth=6, num_classes=3), make_rng(3, "init"))
    m, _ = train(m, train_set.features, train_set.labels, TrainConfig(epochs=8, batch_size=32))
    return m, train_set, eval_set


# --- collection ----------------------------------------------------------------------------

def test_constant_pre_bn_signal():
    m = init_model(SMALL, make_rng(1))
    m.dense[1].weight[:] = 0.0
    m.dense[1].bias[:] = 2.5
    stats = collect_bn_stats(m, calibration_batches(make_rng(2).normal(size=(64, 4)), 16, 0),
                             CalibrationSpec(batch_count=4, batch_size=16))
    assert np.array_equal(stats.mean[1], np.full(6, 2.5))
    assert np.array_equal(stats.var[1], np.zeros(6))


@pytest.mark.parametrize("mode", list(CalibrationMode))
def test_two_single_sample_batches_pool_exactly(mode):
    spec = CalibrationSpec(batch_count=2, batch_size=2, mode=FROZEN)
    if mode is CalibrationMode.BATCH_STAT_PROPAGATION:
        # a one-row batch has no batch statistics; use two identical rows instead
        batches, spec = [np.zeros((2, 1)), np.full((2, 1), 2.0)], CalibrationSpec(2, 2, mode)
    else:
        batches = [np.zeros((1, 1)), np.full((1, 1), 2.0)]
    stats = collect_bn_stats(identity_model(), iter(batches), spec)
    assert stats.mean[0][0] == 1.0 and stats.var[0][0] == 1.0


def test_collection_is_deterministic_and_pure(trained):
    m, train_set, _ = trained
    before = m.copy()
    spec = CalibrationSpec(batch_count=5, batch_size=32, seed=7)
    a = collect_bn_stats(m, calibration_batches(train_set.features, 32, 7), spec)
    b = collect_bn_stats(m, calibration_batches(train_set.features, 32, 7), spec)
    for x, y in zip(a.mean + a.var, b.mean + b.var):
        assert np.array_equal(x, y)
    assert a.sample_count == 5 * 32
    for na, nb in zip(m.bn, before.bn):
        assert np.array_equal(na.running_mean, nb.running_mean) and np.array_equal(na.running_var, nb.running_var)


def test_stream_too_short():
    m = init_model(SMALL, make_rng(1))
    with pytest.raises(InputError):
        collect_bn_stats(m, iter([np.zeros((4, 4))]), CalibrationSpec(batch_count=2, batch_size=4))
    with pytest.raises(InputError):
        next(calibration_batches(np.zeros((3, 4)), 4, 0))


def test_invalid_spec():
    with pytest.raises(ConfigError):
        CalibrationSpec(batch_count=0).validate()
    with pytest.raises(ConfigError):
        CalibrationSpec(batch_size=1).validate()


def test_calibration_stream_reshuffles_each_pass():
    x = np.arange(8.0)[:, None]
    stream = calibration_batches(x, 4, 0)
    first = np.concatenate([next(stream), next(stream)]).ravel()
    second = np.concatenate([next(stream), next(stream)]).ravel()
    assert sorted(first) == sorted(second) == list(range(8))


# --- application ---------------------------------------------------------------------------------

def test_apply_and_read_back(trained):
    m, train_set, _ = trained
    out, stats = reflow(m, train_set.features, CalibrationSpec(batch_count=3, batch_size=32))
    same_except_running_stats(m, out)
    for l, norm in enumerate(out.bn):
        assert np.array_equal(norm.running_mean, stats.mean[l])
        assert np.array_equal(norm.running_var, stats.var[l])


def test_subset_and_empty_subset(trained):
    m, train_set, _ = trained
    _, stats = reflow(m, train_set.features, CalibrationSpec(batch_count=3, batch_size=32))
    none = apply_reflow(m, stats, [])
    for a, b in zip(m.bn, none.bn):
        assert np.array_equal(a.running_mean, b.running_mean) and np.array_equal(a.running_var, b.running_var)
    some = apply_reflow(m, stats, [1, 4])
    for l, (a, b) in enumerate(zip(m.bn, some.bn)):
        expected = stats.mean[l] if l in (1, 4) else a.running_mean
        assert np.array_equal(b.running_mean, expected)


def test_mismatched_stats_rejected(trained):
    m, train_set, _ = trained
    _, stats = reflow(m, train_set.features, CalibrationSpec(batch_count=1, batch_size=32))
    short = RecalibratedStats(stats.mean[:-1], stats.var[:-1], stats.sample_count)
    with pytest.raises(InputError):
        apply_reflow(m, short)
    with pytest.raises(InputError):
        apply_reflow(m, stats, [m.depth])


def test_self_consistency(trained):
    """Two independent large calibrations of the same network agree on held-out variance."""
    m, train_set, eval_set = trained
    m, _ = reflow(m, train_set.features, CalibrationSpec(batch_count=100, batch_size=64, seed=1))
    out, _ = reflow(m, train_set.features, CalibrationSpec(batch_count=100, batch_size=64, seed=2))
    ratios = variance_ratio_report(m, out, eval_set.features).ratios
    assert np.all(np.abs(ratios - 1.0) <= 0.05), ratios


def test_first_layer_stats_are_idempotent_in_frozen_mode(trained):
    m, train_set, _ = trained
    spec = CalibrationSpec(batch_count=4, batch_size=32, mode=FROZEN, seed=1)
    out, stats = reflow(m, train_set.features, spec)
    again = collect_bn_stats(out, calibration_batches(train_set.features, 32, 1), spec)
    assert np.array_equal(again.mean[0], stats.mean[0]) and np.array_equal(again.var[0], stats.var[0])


def test_single_batch_calibration_variance_identity(trained):
    """With one calibration batch, running-stats forwards reproduce the calibration forward."""
    m, train_set, _ = trained
    spec = CalibrationSpec(batch_count=1, batch_size=64, seed=5)
    out, stats = reflow(m, train_set.features, spec)
    batch = next(calibration_batches(train_set.features, 64, 5))
    _, trace = forward(out, batch, tap=True)
    for l, z in enumerate(trace.post):
        expected = stats.var[l] / (stats.var[l] + out.bn[l].epsilon) * out.bn[l].gamma ** 2
        assert np.abs(z.var(axis=0) - expected).max() <= 1e-8


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=6), st.integers(0, 1000))
def test_chunk_order_independence(chunks, seed):
    """Frozen-upstream stats do not depend on how the same samples are batched."""
    m = init_model(SMALL, make_rng(seed, "model"))
    x = make_rng(seed, "x").normal(size=(sum(chunks), 4))
    edges = np.cumsum([0] + chunks)
    batches = [x[a:b] for a, b in zip(edges[:-1], edges[1:])]
    whole = collect_bn_stats(m, iter([x]), CalibrationSpec(1, 2, FROZEN))
    split = collect_bn_stats(m, iter(batches), CalibrationSpec(len(batches), 2, FROZEN))
    rev = collect_bn_stats(m, iter(batches[::-1]), CalibrationSpec(len(batches), 2, FROZEN))
    for other in (split, rev):
        for a, b in zip(whole.mean + whole.var, other.mean + other.var):
            assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_merge_of_disjoint_stats(trained):
    m, train_set, _ = trained
    x = train_set.features
    a = collect_bn_stats(m, iter([x[:100]]), CalibrationSpec(1, 2, FROZEN))
    b = collect_bn_stats(m, iter([x[100:]]), CalibrationSpec(1, 2, FROZEN))
    whole = collect_bn_stats(m, iter([x]), CalibrationSpec(1, 2, FROZEN))
    merged = a.merge(b)
    assert merged.sample_count == x.shape[0]
    for u, v in zip(whole.mean + whole.var, merged.mean + merged.var):
        assert np.allclose(u, v, rtol=0, atol=1e-10)


# --- sweeps ---------------------------------------------------------------------------------

def test_sweep_order():
    assert sweep_order(3, "forward") == [0, 1, 2]
    assert sweep_order(3, "backward") == [2, 1, 0]


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_sweep_endpoints(trained, direction):
    m, train_set, eval_set = trained
    pruned, report = prune_pipeline(m, "magnitude", 0.6, eval_data=(eval_set.features, eval_set.labels))
    full, stats = reflow(pruned, train_set.features, CalibrationSpec(batch_count=5, batch_size=32))
    points = layerwise_recalibration_sweep(pruned, stats, eval_set.features, eval_set.labels, direction)
    assert [p.step_k for p in points] == list(range(m.depth + 1))
    assert points[0].cumulative_accuracy_pct == report.post_accuracy_pct
    assert points[-1].cumulative_accuracy_pct == accuracy(full, eval_set.features, eval_set.labels)
    assert sorted(p.layer_index for p in points[1:]) == list(range(m.depth))


def test_steps_to_fraction_of_gain():
    from collapse_lab.reflow import SweepPoint

    def curve(*accs):
        return [SweepPoint(k, k - 1, "forward", a) for k, a in enumerate(accs)]

    assert steps_to_fraction_of_gain(curve(10, 20, 60, 90)) == 2
    assert steps_to_fraction_of_gain(curve(10, 49, 60, 90)) == 2
    assert steps_to_fraction_of_gain(curve(10, 55, 60, 90)) == 1
    assert steps_to_fraction_of_gain(curve(50, 40, 50)) is None
