"""Signal-collapse measurements and mask-similarity metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import as_tensor, make_rng
from .errors import InputError, ShapeError
from .model import ActivationTrace, Model, forward

COLLAPSE_THRESHOLD = 0.1
PROBE_SIZE = 512


@dataclass
class LayerVariance:
    layer_index: int
    mean_orig: float
    var_orig: float
    mean_pruned: float
    var_pruned: float

    @property
    def ratio(self) -> float:
        if self.var_orig > 0:
            return self.var_pruned / self.var_orig
        return math.nan


@dataclass
class VarianceReport:
    layers: list[LayerVariance]

    @property
    def ratios(self) -> np.ndarray:
        return np.array([row.ratio for row in self.layers])

    @property
    def final_ratio(self) -> float:
        return self.layers[-1].ratio

    def etas(self) -> np.ndarray:
        """Measured per-layer scaling factors ``ratio_l / ratio_{l-1}`` (``ratio_0 = 1``)."""
        r = self.ratios
        prev = np.concatenate([[1.0], r[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            return r / prev


@dataclass
class CollapseVerdict:
    collapsed: bool
    threshold: float
    layers_below: list[int] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.collapsed


@dataclass
class PredictionHistogram:
    counts: np.ndarray
    total: int
    modal_class: int
    modal_fraction: float

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.total


@dataclass
class HammingReport:
    raw: int
    d: int
    normalized: float


def global_mean_var(tensor) -> tuple[float, float]:
    """Scalar mean and population variance over every element of ``tensor``."""
    x = as_tensor(tensor)
    if x.size == 0:
        raise InputError("cannot summarise an empty tensor")
    mean = x.mean()
    return float(mean), float(((x - mean) ** 2).mean())


def probe_batch(features, size: int = PROBE_SIZE, seed: int = 0) -> np.ndarray:
    """Fixed held-out batch for variance diagnostics: a seeded subset of ``size`` rows.

    Rows keep their original relative order; the whole set is returned when
    it has at most ``size`` rows.
    """
    x = as_tensor(features)
    if x.shape[0] <= size:
        return x
    idx = np.sort(make_rng(seed, "diagnostics/probe").permutation(x.shape[0])[:size])
    return x[idx]


def activation_stats(trace: ActivationTrace) -> list[tuple[float, float]]:
    """Per-BN-layer ``(Mean, Var)`` of the post-BN activations."""
    if len(trace) == 0:
        raise InputError("empty activation trace")
    return [global_mean_var(z) for z in trace.post]


def variance_ratio_report(original: Model, pruned: Model, batch) -> VarianceReport:
    """Compare post-BN global statistics of two models on the same batch (running-stats mode)."""
    if original.config != pruned.config:
        raise InputError("models do not share an architecture")
    _, t_orig = forward(original, batch, tap=True)
    _, t_pruned = forward(pruned, batch, tap=True)
    rows = []
    for l, ((m_o, v_o), (m_p, v_p)) in enumerate(zip(activation_stats(t_orig), activation_stats(t_pruned))):
        rows.append(LayerVariance(l, m_o, v_o, m_p, v_p))
    return VarianceReport(rows)


def cumulative_variance_projection(etas) -> float:
    """Product of per-layer variance scaling factors."""
    etas = [float(e) for e in etas]
    if any(e < 0 for e in etas):
        raise InputError("scaling factors must be non-negative")
    return math.prod(etas)


def detect_signal_collapse(report: VarianceReport, threshold: float = COLLAPSE_THRESHOLD) -> CollapseVerdict:
    """Collapse means the last BN layer's variance ratio fell below ``threshold``."""
    if not report.layers:
        raise InputError("empty variance report")
    below = [row.layer_index for row in report.layers if row.ratio < threshold]
    return CollapseVerdict(bool(report.final_ratio < threshold), threshold, below)


def prediction_histogram(model: Model, features, num_classes: int | None = None) -> PredictionHistogram:
    """Counts of argmax predictions; argmax ties go to the lowest class index."""
    logits, _ = forward(model, features)
    C = logits.shape[1] if num_classes is None else num_classes
    counts = np.bincount(np.argmax(logits, axis=1), minlength=C)
    total = int(counts.sum())
    if total == 0:
        raise InputError("empty evaluation set")
    modal = int(np.argmax(counts))
    return PredictionHistogram(counts, total, modal, counts[modal] / total)


def normalized_hamming(a, b) -> HammingReport:
    """Number and fraction of positions where two masks disagree."""
    ma = np.asarray(getattr(a, "m", a))
    mb = np.asarray(getattr(b, "m", b))
    if ma.shape != mb.shape:
        raise ShapeError(f"masks have lengths {ma.shape} and {mb.shape}")
    raw = int(np.count_nonzero(ma != mb))
    d = ma.shape[0]
    return HammingReport(raw, d, raw / d if d else 0.0)


def random_mask_distance_band(sparsity: float, d: int, n_sigma: float = 3.0) -> tuple[float, float, float]:
    """Expected normalised distance of a random mask from a fixed one, with a binomial band.

    Returns ``(expected, low, high)`` where expected is ``2 k (1 - k)``.
    """
    p = 2.0 * sparsity * (1.0 - sparsity)
    half = n_sigma * math.sqrt(p * (1.0 - p) / d)
    return p, p - half, p + half
