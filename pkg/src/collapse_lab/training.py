"""Training loop, cross-entropy, backpropagation and per-sample gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .core_math import make_rng
from .errors import ConfigError, InputError, NumericError, ShapeError
from .model import BNMode, ForwardCache, Model, accuracy, forward_cached


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 42
    grad_clip: float | None = 5.0

    def validate(self) -> "TrainConfig":
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError("epochs must be a non-negative integer")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise ConfigError("batch_size must be an integer >= 2")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        return self


@dataclass
class GradientStack:
    """Per-sample loss gradients for one layer block, one row per sample."""

    rows: np.ndarray

    @property
    def n(self) -> int:
        return self.rows.shape[0]


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape} labels for {logits.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def per_sample_losses(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    return -log_softmax(logits, axis=1)[np.arange(labels.size), labels]


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood with log-sum-exp stabilisation."""
    return float(per_sample_losses(logits, labels).mean())


def _logit_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(per-sample loss)/d(logits), unscaled by the batch size."""
    g = softmax(logits, axis=1)
    g[np.arange(labels.size), labels] -= 1.0
    return g


def _backward(model: Model, cache: ForwardCache, dlogits: np.ndarray, stop_at: int | None = None):
    """Walk the network backwards.

    Yields ``("dense", l, dx)`` with ``dx`` the gradient w.r.t. dense layer
    ``l``'s output, and ``("bn", l, d_gamma, d_beta)`` for each BN layer.
    ``stop_at`` ends the walk once that dense layer is reached.
    """
    L = model.depth
    dout = dlogits
    yield ("dense", L, dout)
    if stop_at == L:
        return
    dh = dout @ model.dense[L].weight
    for l in range(L - 1, -1, -1):
        norm = model.bn[l]
        dz = dh * (cache.post[l] > 0)
        xhat = cache.xhat[l]
        yield ("bn", l, (dz * xhat).sum(axis=0), dz.sum(axis=0))
        dxhat = dz * norm.gamma
        if cache.mode is BNMode.TRAINING_STATS:
            n = dxhat.shape[0]
            dx = (cache.inv_std[l] / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dx = dxhat * cache.inv_std[l]
        yield ("dense", l, dx)
        if stop_at == l:
            return
        dh = dx @ model.dense[l].weight


def gradients(model: Model, batch, labels, mode: BNMode | str = BNMode.RUNNING_STATS):
    """Gradient of the batch-mean cross-entropy w.r.t. every trainable tensor.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``Model.parameters``.
    TrainingStats mode updates the running statistics as a side effect.
    """
    cache = forward_cached(model, batch, mode)
    labels = _check_labels(cache.logits, labels)
    n = labels.size
    loss = float(per_sample_losses(cache.logits, labels).mean())
    grads = {}
    for item in _backward(model, cache, _logit_grad(cache.logits, labels) / n):
        if item[0] == "dense":
            _, l, dx = item
            grads[f"dense.{l}.weight"] = dx.T @ cache.inputs[l]
            grads[f"dense.{l}.bias"] = dx.sum(axis=0)
        else:
            _, l, dgamma, dbeta = item
            grads[f"bn.{l}.gamma"] = dgamma
            grads[f"bn.{l}.beta"] = dbeta
    return loss, grads


def block_gradient(grads: dict[str, np.ndarray], block: int) -> np.ndarray:
    return np.concatenate([grads[f"dense.{block}.weight"].ravel(), grads[f"dense.{block}.bias"]])


def _check_blocks(model: Model, blocks) -> list[int]:
    n_blocks = len(model.dense)
    out = []
    for b in blocks:
        if not isinstance(b, (int, np.integer)) or not 0 <= b < n_blocks:
            raise InputError(f"unknown layer block {b!r}; valid ids are 0..{n_blocks - 1}")
        out.append(int(b))
    return out


def per_sample_gradients_all(model: Model, batch, labels, blocks=None) -> dict[int, GradientStack]:
    """Per-sample gradient stacks for several layer blocks from one backward pass.

    BN uses running statistics, so each sample's loss depends on that sample
    alone. Row ``i`` of block ``b`` is ``[vec(dW_b), db_b]`` of sample ``i``'s loss.
    """
    blocks = _check_blocks(model, range(len(model.dense)) if blocks is None else blocks)
    cache = forward_cached(model, batch, BNMode.RUNNING_STATS)
    labels = _check_labels(cache.logits, labels)
    wanted = set(blocks)
    out = {}
    for item in _backward(model, cache, _logit_grad(cache.logits, labels), stop_at=min(blocks)):
        if item[0] != "dense" or item[1] not in wanted:
            continue
        _, l, dx = item
        h = cache.inputs[l]
        n = dx.shape[0]
        rows = np.empty((n, dx.shape[1] * h.shape[1] + dx.shape[1]))
        rows[:, : dx.shape[1] * h.shape[1]] = (dx[:, :, None] * h[:, None, :]).reshape(n, -1)
        rows[:, dx.shape[1] * h.shape[1] :] = dx
        out[l] = GradientStack(rows)
    return out


def per_sample_gradients(model: Model, batch, labels, block: int) -> GradientStack:
    return per_sample_gradients_all(model, batch, labels, [block])[block]


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def sgd_step(model: Model, grads: dict[str, np.ndarray], lr: float, momentum: float,
             velocity: dict[str, np.ndarray] | None = None):
    """Heavy-ball step ``v <- momentum * v + g``; ``theta <- theta - lr * v``.

    Returns ``(new_model, new_velocity)``. Running statistics are copied
    unchanged.
    """
    params = model.parameters()
    velocity = {} if velocity is None else velocity
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, parameter has {params[name].shape}")
    out = model.copy()
    new_velocity = {}
    for name, g in grads.items():
        v = g if name not in velocity else momentum * velocity[name] + g
        new_velocity[name] = v
        out.set_parameter(name, params[name] - lr * v)
    return out, new_velocity


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy_pct: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)


def train(model: Model, features, labels, cfg: TrainConfig):
    """Minibatch SGD with momentum under batch-statistics normalisation.

    The shuffle order comes from ``cfg.seed`` alone. The input model is not
    modified; ``(trained_model, history)`` is returned. History rows hold the
    mean minibatch loss and the running-stats training accuracy per epoch.
    Gradients are clipped to global norm ``cfg.grad_clip`` when it is set.
    """
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise InputError("training set is empty")
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ShapeError(f"features of shape {x.shape} do not fit input_dim {model.config.input_dim}")
    model = model.copy()
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history
    rng = make_rng(cfg.seed, "train/shuffle")
    velocity = None
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            loss, grads = gradients(model, x[idx], y[idx], BNMode.TRAINING_STATS)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged: non-finite loss in epoch {epoch + 1}")
            if cfg.grad_clip is not None:
                grads = clip_gradients(grads, cfg.grad_clip)
            model, velocity = sgd_step(model, grads, cfg.learning_rate, cfg.momentum, velocity)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        history.records.append(EpochRecord(epoch + 1, mean_loss, accuracy(model, x, y)))
    return model, history
