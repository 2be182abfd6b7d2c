"""BN running-statistic recalibration of pruned networks.

Only the running mean and variance of the BN layers change; every dense
weight, bias, gamma and beta stays bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from .core_math import StreamingStats, as_tensor, make_rng, stats_accumulate, stats_merge
from .errors import ConfigError, InputError
from .model import BNMode, Model, accuracy, forward_cached


class CalibrationMode(str, Enum):
    BATCH_STAT_PROPAGATION = "batch_stat_propagation"
    FROZEN_UPSTREAM = "frozen_upstream"


class SweepDirection(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class CalibrationSpec:
    batch_count: int = 50
    batch_size: int = 128
    mode: CalibrationMode = CalibrationMode.BATCH_STAT_PROPAGATION
    seed: int = 0

    def validate(self) -> "CalibrationSpec":
        if self.batch_count < 1:
            raise ConfigError("batch_count must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        CalibrationMode(self.mode)
        return self


@dataclass
class RecalibratedStats:
    mean: list[np.ndarray]
    var: list[np.ndarray]
    sample_count: int

    def __len__(self) -> int:
        return len(self.mean)

    @classmethod
    def from_accumulators(cls, accs: list[StreamingStats]) -> "RecalibratedStats":
        return cls([a.mean.copy() for a in accs], [a.variance.copy() for a in accs], accs[0].count)

    def merge(self, other: "RecalibratedStats") -> "RecalibratedStats":
        """Pool two sets of statistics gathered on disjoint calibration samples."""
        merged = [stats_merge(a, b) for a, b in zip(self.accumulators(), other.accumulators())]
        return RecalibratedStats.from_accumulators(merged)

    def accumulators(self) -> list[StreamingStats]:
        n = self.sample_count
        return [StreamingStats(n, m.copy(), v * n) for m, v in zip(self.mean, self.var)]


def calibration_batches(features, batch_size: int, seed: int, label: str = "calibration") -> Iterator[np.ndarray]:
    """Endless stream of training batches: a fresh seeded permutation per pass."""
    x = as_tensor(features)
    rng = make_rng(seed, label)
    n = x.shape[0]
    if n < batch_size:
        raise InputError(f"calibration data holds {n} samples, fewer than one batch of {batch_size}")
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield x[order[pos : pos + batch_size]]
        pos += batch_size


def collect_bn_stats(pruned: Model, calib: Iterable[np.ndarray], spec: CalibrationSpec = CalibrationSpec()) -> RecalibratedStats:
    """Exact population mean/variance of each layer's pre-BN activations.

    Statistics are pooled over the first ``spec.batch_count`` batches of
    ``calib``. In batch-stat-propagation mode every calibration forward
    normalises with that batch's own statistics, so each layer sees the
    corrected signal of the layers before it. In frozen-upstream mode the
    forward uses the model's existing running statistics throughout. The
    model itself is never modified.
    """
    spec.validate()
    mode = CalibrationMode(spec.mode)
    # a scratch copy absorbs the running-stat side effect of batch-stat forwards
    work = pruned.copy() if mode is CalibrationMode.BATCH_STAT_PROPAGATION else pruned
    bn_mode = BNMode.TRAINING_STATS if mode is CalibrationMode.BATCH_STAT_PROPAGATION else BNMode.RUNNING_STATS
    accs = [StreamingStats.empty(pruned.config.width) for _ in range(pruned.depth)]
    seen = 0
    for batch in calib:
        if seen == spec.batch_count:
            break
        cache = forward_cached(work, batch, bn_mode)
        accs = [stats_accumulate(a, x) for a, x in zip(accs, cache.pre)]
        seen += 1
    if seen < spec.batch_count:
        raise InputError(f"calibration stream ended after {seen} of {spec.batch_count} batches")
    return RecalibratedStats.from_accumulators(accs)


def apply_reflow(pruned: Model, stats: RecalibratedStats, layers: Iterable[int] | None = None) -> Model:
    """Copy of ``pruned`` whose selected BN layers use the recalibrated statistics."""
    layers = range(pruned.depth) if layers is None else list(layers)
    if len(stats) != pruned.depth:
        raise InputError(f"statistics cover {len(stats)} BN layers, model has {pruned.depth}")
    out = pruned.copy()
    for l in layers:
        if not 0 <= l < pruned.depth:
            raise InputError(f"no BN layer {l}")
        if stats.mean[l].shape != out.bn[l].running_mean.shape:
            raise InputError(f"statistics for layer {l} have the wrong width")
        out.bn[l].running_mean = stats.mean[l].copy()
        out.bn[l].running_var = stats.var[l].copy()
    return out


def reflow(pruned: Model, features, spec: CalibrationSpec = CalibrationSpec()) -> tuple[Model, RecalibratedStats]:
    """Collect statistics on training ``features`` and apply them to every BN layer."""
    stats = collect_bn_stats(pruned, calibration_batches(features, spec.batch_size, spec.seed), spec)
    return apply_reflow(pruned, stats), stats


@dataclass
class SweepPoint:
    step_k: int
    layer_index: int  # BN layer recalibrated at this step, -1 for k = 0
    direction: SweepDirection
    cumulative_accuracy_pct: float


def sweep_order(depth: int, direction: SweepDirection | str) -> list[int]:
    order = list(range(depth))
    return order[::-1] if SweepDirection(direction) is SweepDirection.BACKWARD else order


def layerwise_recalibration_sweep(pruned: Model, stats: RecalibratedStats, eval_features, eval_labels,
                                  direction: SweepDirection | str) -> list[SweepPoint]:
    """Accuracy after recalibrating the first ``k`` BN layers in sweep order, for k = 0..L."""
    direction = SweepDirection(direction)
    order = sweep_order(pruned.depth, direction)
    points = [SweepPoint(0, -1, direction, accuracy(pruned, eval_features, eval_labels))]
    for k in range(1, pruned.depth + 1):
        model = apply_reflow(pruned, stats, order[:k])
        points.append(SweepPoint(k, order[k - 1], direction, accuracy(model, eval_features, eval_labels)))
    return points


def steps_to_fraction_of_gain(points: list[SweepPoint], fraction: float = 0.5) -> int | None:
    """Smallest ``k`` whose gain over ``k = 0`` reaches ``fraction`` of the final gain."""
    start = points[0].cumulative_accuracy_pct
    total = points[-1].cumulative_accuracy_pct - start
    if total <= 0:
        return None
    for p in points:
        if p.cumulative_accuracy_pct - start >= fraction * total:
            return p.step_k
    return None
