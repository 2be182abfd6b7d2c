"""Pruning scores, masks, empirical Fisher blocks and second-order weight updates.

Selection and update are kept separate so that any scoring rule can be run
either as pure selection (masked weights zeroed, everything else untouched)
or followed by the Fisher-based compensating update of the surviving weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core_math import FisherBlock, as_tensor, fisher_inverse_vector, make_rng, spd_solve
from .errors import InputError, PreconditionError, ShapeError
from .model import Model, accuracy
from .training import per_sample_gradients_all

DAMPING_FLOOR = 1e-8


class ScoreMethod(str, Enum):
    RANDOM = "random"
    MAGNITUDE = "magnitude"
    OBD = "obd"
    OBS = "obs"


class UpdateMode(str, Enum):
    SELECTION_ONLY = "selection"
    FISHER_UPDATE = "fisher_update"


@dataclass
class ScoreVector:
    z: np.ndarray
    method: ScoreMethod


@dataclass
class PruneMask:
    m: np.ndarray  # 1 = keep, 0 = pruned
    sparsity: float

    def __len__(self) -> int:
        return self.m.shape[0]

    @property
    def pruned(self) -> np.ndarray:
        return self.m == 0


@dataclass
class FisherEstimate:
    """Per-layer damped empirical Fisher blocks, keyed by dense-layer index."""

    blocks: dict[int, FisherBlock]
    n_samples: int
    damping_rel: float

    def __getitem__(self, block: int) -> FisherBlock:
        return self.blocks[block]


@dataclass(frozen=True)
class FisherConfig:
    n_samples: int = 512
    damping_rel: float = 1e-4
    seed: int = 0


@dataclass
class PruneReport:
    method: ScoreMethod
    update_mode: UpdateMode
    sparsity: float
    mask: PruneMask
    pre_accuracy_pct: float
    post_accuracy_pct: float
    wall_ms: float
    fisher: FisherConfig | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Scores and masks
# ---------------------------------------------------------------------------

def score_weights(model: Model, method: ScoreMethod | str, fisher: FisherEstimate | None = None,
                  rng: np.random.Generator | None = None, theta: np.ndarray | None = None) -> ScoreVector:
    """Importance score per prunable parameter; low scores are pruned first.

    magnitude: ``|theta|``; obd: ``theta^2 / (2 H_ii)``; obs:
    ``theta^2 / (2 [H^-1]_ii)``, with ``H`` the damped per-layer Fisher;
    random: i.i.d. uniform(0, 1).
    """
    method = ScoreMethod(method)
    theta = model.prunable_vector() if theta is None else as_tensor(theta)
    if method is ScoreMethod.MAGNITUDE:
        return ScoreVector(np.abs(theta), method)
    if method is ScoreMethod.RANDOM:
        if rng is None:
            raise PreconditionError("random scoring needs an rng")
        return ScoreVector(rng.random(theta.shape[0]), method)
    if fisher is None:
        raise PreconditionError(f"{method.value} scoring needs a Fisher estimate")
    z = np.empty_like(theta)
    for b, sl in enumerate(model.block_slices()):
        if b not in fisher.blocks:
            raise PreconditionError(f"Fisher estimate lacks layer block {b}")
        block = fisher.blocks[b]
        curvature = block.diagonal() if method is ScoreMethod.OBD else block.inverse_diagonal()
        z[sl] = theta[sl] ** 2 / (2.0 * curvature)
    return ScoreVector(z, method)


def prune_count(d: int, sparsity: float) -> int:
    # half-up rounding of sparsity * d
    return min(d, int(np.floor(sparsity * d + 0.5)))


def build_mask(scores: ScoreVector | np.ndarray, sparsity: float) -> PruneMask:
    """Zero the ``round(sparsity * d)`` lowest scores; ties prune the lower index first."""
    if not 0.0 <= sparsity <= 1.0:
        raise PreconditionError(f"sparsity must lie in [0, 1], got {sparsity}")
    z = scores.z if isinstance(scores, ScoreVector) else as_tensor(scores)
    k = prune_count(z.shape[0], sparsity)
    order = np.argsort(z, kind="stable")
    m = np.ones(z.shape[0], dtype=np.int8)
    m[order[:k]] = 0
    return PruneMask(m, sparsity)


def apply_mask(model: Model, mask: PruneMask) -> Model:
    """Return a copy with masked prunable parameters set to exactly zero."""
    if len(mask) != model.num_prunable:
        raise ShapeError(f"mask has length {len(mask)}, model has {model.num_prunable} prunable parameters")
    out = model.copy()
    for b, sl in enumerate(model.block_slices()):
        keep = mask.m[sl] == 1
        if keep.all():
            continue
        layer = out.dense[b]
        n_w = layer.weight.size
        layer.weight = np.where(keep[:n_w].reshape(layer.weight.shape), layer.weight, 0.0)
        layer.bias = np.where(keep[n_w:], layer.bias, 0.0)
    return out


# ---------------------------------------------------------------------------
# Empirical Fisher
# ---------------------------------------------------------------------------

def fisher_from_gradients(grads, damping_rel: float) -> FisherBlock:
    """Damped block with ``damping = damping_rel * trace(F) / d`` (floored)."""
    if damping_rel <= 0:
        raise PreconditionError("damping_rel must be positive")
    grads = np.atleast_2d(as_tensor(grads))
    n, d = grads.shape
    trace = float((grads**2).sum() / n) if n else 0.0
    return FisherBlock(grads, max(damping_rel * trace / d, DAMPING_FLOOR))


def estimate_fisher(model: Model, features, labels, n_samples: int = 512, damping_rel: float = 1e-4,
                    blocks=None, seed: int = 0) -> FisherEstimate:
    """Empirical Fisher ``(1/n) sum g_i g_i^T`` per layer block at the current weights.

    The ``n_samples`` rows are a seeded random subset of the data.
    """
    features = as_tensor(features)
    if n_samples < 1:
        raise PreconditionError("n_samples must be >= 1")
    if n_samples > features.shape[0]:
        raise InputError(f"asked for {n_samples} Fisher samples from {features.shape[0]} available")
    idx = np.sort(make_rng(seed, "fisher/samples").permutation(features.shape[0])[:n_samples])
    stacks = per_sample_gradients_all(model, features[idx], np.asarray(labels)[idx], blocks)
    return FisherEstimate(
        {b: fisher_from_gradients(s.rows, damping_rel) for b, s in sorted(stacks.items())},
        n_samples,
        damping_rel,
    )


# ---------------------------------------------------------------------------
# Second-order updates
# ---------------------------------------------------------------------------

def obs_single_update(theta_bar, H, i: int) -> np.ndarray:
    """Optimal change of all weights when weight ``i`` is forced to zero.

    ``delta = -theta_i * H^-1 e_i / [H^-1]_ii``; the ``i``-th entry is then
    set to ``-theta_i`` exactly.
    """
    theta_bar = as_tensor(theta_bar)
    H = as_tensor(H)
    e = np.zeros(theta_bar.shape[0])
    e[i] = 1.0
    col = spd_solve(H, e)
    delta = -theta_bar[i] * col / col[i]
    delta[i] = -theta_bar[i]
    return delta


def quadratic_loss(H, delta) -> float:
    delta = as_tensor(delta)
    return 0.5 * float(delta @ (as_tensor(H) @ delta))


def joint_obs_update(layer_params, block: FisherBlock | np.ndarray, layer_mask, method: str = "auto") -> np.ndarray:
    """Minimise ``0.5 delta^T H delta`` subject to the pruned weights reaching zero.

    ``layer_mask`` is 1 for kept and 0 for pruned coordinates. The kept
    weights move by ``delta_K = H_KK^-1 H_KP theta_P``; pruned ones come out
    exactly zero. ``block`` is a ``FisherBlock`` or an explicit SPD matrix.
    """
    theta = as_tensor(layer_params)
    keep = np.asarray(layer_mask) == 1
    if keep.shape != theta.shape:
        raise ShapeError(f"mask has shape {keep.shape}, parameters have {theta.shape}")
    out = np.where(keep, theta, 0.0)
    K = np.flatnonzero(keep)
    P = np.flatnonzero(~keep)
    if P.size == 0 or K.size == 0:
        return out
    theta_P = theta[P]
    if isinstance(block, FisherBlock):
        if block.dim != theta.shape[0]:
            raise ShapeError(f"Fisher block has dimension {block.dim}, parameters {theta.shape[0]}")
        if block.use_dense(method):
            H = block.damped()
            delta_K = spd_solve(H[np.ix_(K, K)], H[np.ix_(K, P)] @ theta_P)
        else:
            # damping * I has no K-P cross terms, only the low-rank part does
            G = block.grads
            rhs = G[:, K].T @ (G[:, P] @ theta_P) / block.n
            delta_K = fisher_inverse_vector(block.columns(K), rhs, method="lowrank")
    else:
        H = as_tensor(block)
        delta_K = spd_solve(H[np.ix_(K, K)], H[np.ix_(K, P)] @ theta_P)
    out[K] = theta[K] + delta_K
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def needs_fisher(method: ScoreMethod | str, update_mode: UpdateMode | str) -> bool:
    return ScoreMethod(method) in (ScoreMethod.OBD, ScoreMethod.OBS) or (
        UpdateMode(update_mode) is UpdateMode.FISHER_UPDATE
    )


def prune_pipeline(model: Model, method: ScoreMethod | str, sparsity: float,
                   update_mode: UpdateMode | str = UpdateMode.SELECTION_ONLY,
                   train_data=None, eval_data=None, fisher_cfg: FisherConfig = FisherConfig(),
                   fisher: FisherEstimate | None = None, seed: int = 0):
    """Score, mask globally, zero, and optionally apply per-layer Fisher updates.

    ``train_data`` / ``eval_data`` are ``(features, labels)`` pairs; the
    Fisher comes from ``train_data`` unless a precomputed ``fisher`` is
    passed, and accuracies are measured on ``eval_data`` when given.
    Returns ``(pruned_model, report)``.
    """
    method = ScoreMethod(method)
    update_mode = UpdateMode(update_mode)
    t0 = time.perf_counter()
    if fisher is None and needs_fisher(method, update_mode):
        if train_data is None:
            raise PreconditionError(f"{method.value}/{update_mode.value} needs training data for the Fisher")
        fisher = estimate_fisher(model, *train_data, fisher_cfg.n_samples, fisher_cfg.damping_rel,
                                 seed=fisher_cfg.seed)
    rng = make_rng(seed, f"prune/random/{sparsity!r}") if method is ScoreMethod.RANDOM else None
    scores = score_weights(model, method, fisher, rng)
    mask = build_mask(scores, sparsity)
    pruned = apply_mask(model, mask)
    if update_mode is UpdateMode.FISHER_UPDATE:
        for b, sl in enumerate(model.block_slices()):
            layer_mask = mask.m[sl]
            if layer_mask.all():
                continue
            pruned.set_block_vector(b, joint_obs_update(model.block_vector(b), fisher[b], layer_mask))
    wall_ms = (time.perf_counter() - t0) * 1e3
    pre = post = float("nan")
    if eval_data is not None:
        pre = accuracy(model, *eval_data)
        post = accuracy(pruned, *eval_data)
    report = PruneReport(method, update_mode, sparsity, mask, pre, post, wall_ms,
                         fisher_cfg if fisher is not None else None)
    return pruned, report
