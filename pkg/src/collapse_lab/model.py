"""Batch-normalised dense network with [Linear -> BN -> ReLU] x depth + classifier."""

from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .core_math import as_tensor
from .errors import ConfigError, FormatError, PreconditionError, ShapeError

MAX_DEPTH = 64


class BNMode(str, Enum):
    TRAINING_STATS = "training_stats"
    RUNNING_STATS = "running_stats"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 20
    width: int = 48
    depth: int = 24
    num_classes: int = 10
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> "ModelConfig":
        for name in ("input_dim", "width", "depth"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.depth > MAX_DEPTH:
            raise ConfigError(f"depth {self.depth} exceeds the ceiling of {MAX_DEPTH}")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes!r}")
        if not self.bn_epsilon > 0:
            raise ConfigError("bn_epsilon must be positive")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError("bn_momentum must lie in (0, 1]")
        return self


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5


@dataclass
class Model:
    """The network; ``dense[-1]`` is the classifier, ``bn[l]`` follows ``dense[l]``.

    The prunable parameter vector is every dense weight (row-major) followed
    by that layer's bias, layer by layer from input to classifier. BN
    parameters are not part of it.
    """

    config: ModelConfig
    dense: list[DenseLayer]
    bn: list[BatchNormLayer]

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    @property
    def depth(self) -> int:
        return len(self.bn)

    # -- prunable parameter vector ------------------------------------------

    def block_sizes(self) -> list[int]:
        return [layer.size for layer in self.dense]

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for size in self.block_sizes():
            out.append(slice(start, start + size))
            start += size
        return out

    @property
    def num_prunable(self) -> int:
        return sum(self.block_sizes())

    def block_vector(self, block: int) -> np.ndarray:
        layer = self.dense[block]
        return np.concatenate([layer.weight.ravel(), layer.bias])

    def set_block_vector(self, block: int, values: np.ndarray) -> None:
        layer = self.dense[block]
        n_w = layer.weight.size
        layer.weight = np.asarray(values[:n_w], dtype=np.float64).reshape(layer.weight.shape).copy()
        layer.bias = np.asarray(values[n_w:], dtype=np.float64).copy()

    def prunable_vector(self) -> np.ndarray:
        return np.concatenate([self.block_vector(i) for i in range(len(self.dense))])

    def with_prunable_vector(self, theta: np.ndarray) -> "Model":
        theta = as_tensor(theta)
        if theta.shape != (self.num_prunable,):
            raise ShapeError(f"parameter vector has shape {theta.shape}, model has {self.num_prunable}")
        out = self.copy()
        for i, sl in enumerate(self.block_slices()):
            out.set_block_vector(i, theta[sl])
        return out

    # -- named trainable tensors --------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors (dense weights/biases and BN affine), by name."""
        params = {}
        for i, layer in enumerate(self.dense):
            params[f"dense.{i}.weight"] = layer.weight
            params[f"dense.{i}.bias"] = layer.bias
        for i, norm in enumerate(self.bn):
            params[f"bn.{i}.gamma"] = norm.gamma
            params[f"bn.{i}.beta"] = norm.beta
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        kind, idx, attr = name.split(".")
        owner = (self.dense if kind == "dense" else self.bn)[int(idx)]
        setattr(owner, attr, value)


@dataclass
class ActivationTrace:
    """Pre-BN (``pre``) and post-BN (``post``) activations for each BN layer."""

    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pre)


def init_model(config: ModelConfig, rng: np.random.Generator) -> Model:
    """Weights ~ N(0, 1/in_dim), zero biases, identity BN."""
    config.validate()
    dims = [config.input_dim] + [config.width] * config.depth + [config.num_classes]
    dense = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weight = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        dense.append(DenseLayer(weight, np.zeros(fan_out)))
    bn = [
        BatchNormLayer(
            gamma=np.ones(config.width),
            beta=np.zeros(config.width),
            running_mean=np.zeros(config.width),
            running_var=np.ones(config.width),
            epsilon=config.bn_epsilon,
        )
        for _ in range(config.depth)
    ]
    return Model(config, dense, bn)


@dataclass
class ForwardCache:
    """Intermediate values needed by backpropagation."""

    mode: BNMode
    inputs: list[np.ndarray]  # input of each dense layer
    pre: list[np.ndarray]
    post: list[np.ndarray]
    xhat: list[np.ndarray]
    inv_std: list[np.ndarray]
    logits: np.ndarray | None = None


def _check_batch(model: Model, batch) -> np.ndarray:
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ShapeError(f"batch must have shape (n, {model.config.input_dim}), got {x.shape}")
    return x


def forward_cached(model: Model, batch, mode: BNMode | str = BNMode.RUNNING_STATS) -> ForwardCache:
    """Forward pass keeping every intermediate. TrainingStats mode updates running stats in place."""
    mode = BNMode(mode)
    h = _check_batch(model, batch)
    if mode is BNMode.TRAINING_STATS and h.shape[0] < 2:
        raise PreconditionError("batch statistics need at least two samples")
    cache = ForwardCache(mode, [], [], [], [], [])
    for layer, norm in zip(model.dense[:-1], model.bn):
        cache.inputs.append(h)
        x = h @ layer.weight.T + layer.bias
        if mode is BNMode.TRAINING_STATS:
            mu = x.mean(axis=0)
            var = ((x - mu) ** 2).mean(axis=0)
            n = x.shape[0]
            rho = model.config.bn_momentum
            norm.running_mean = (1.0 - rho) * norm.running_mean + rho * mu
            # unbiased estimate: the biased one under-reads population variance by 1/n,
            # and that deficit compounds across layers in running-stats forwards
            norm.running_var = (1.0 - rho) * norm.running_var + rho * var * (n / (n - 1))
        else:
            mu, var = norm.running_mean, norm.running_var
        inv_std = 1.0 / np.sqrt(var + norm.epsilon)
        xhat = (x - mu) * inv_std
        z = xhat * norm.gamma + norm.beta
        cache.pre.append(x)
        cache.post.append(z)
        cache.xhat.append(xhat)
        cache.inv_std.append(inv_std)
        h = np.maximum(z, 0.0)
    cache.inputs.append(h)
    head = model.dense[-1]
    cache.logits = h @ head.weight.T + head.bias
    return cache


def forward(model: Model, batch, mode: BNMode | str = BNMode.RUNNING_STATS, tap: bool = False):
    """Return ``(logits, trace)``; ``trace`` is None unless ``tap``.

    RunningStats mode normalises with the stored running statistics and leaves
    the model untouched. TrainingStats mode normalises with the batch's own
    statistics and moves the running statistics towards them.
    """
    cache = forward_cached(model, batch, mode)
    trace = ActivationTrace(cache.pre, cache.post) if tap else None
    return cache.logits, trace


def predict(model: Model, batch) -> np.ndarray:
    logits, _ = forward(model, batch)
    return np.argmax(logits, axis=1)


def accuracy(model: Model, features, labels) -> float:
    """Percentage of correct argmax predictions under running statistics."""
    return 100.0 * float(np.mean(predict(model, features) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"RFLW"
VERSION = 1
DTYPE_F64 = 1


def _named_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    cfg = model.config
    header = np.array(
        [cfg.input_dim, cfg.width, cfg.depth, cfg.num_classes, cfg.bn_epsilon, cfg.bn_momentum],
        dtype=np.float64,
    )
    tensors = [("config", header)]
    for i, layer in enumerate(model.dense):
        tensors.append((f"dense.{i}.weight", layer.weight))
        tensors.append((f"dense.{i}.bias", layer.bias))
    for i, norm in enumerate(model.bn):
        tensors.append((f"bn.{i}.gamma", norm.gamma))
        tensors.append((f"bn.{i}.beta", norm.beta))
        tensors.append((f"bn.{i}.running_mean", norm.running_mean))
        tensors.append((f"bn.{i}.running_var", norm.running_var))
        tensors.append((f"bn.{i}.epsilon", np.array([norm.epsilon])))
    return tensors


def checkpoint_bytes(model: Model) -> bytes:
    tensors = _named_tensors(model)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Model:
    if len(data) < 16:
        raise FormatError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("CRC mismatch: checkpoint is corrupted")
    reader = _Reader(body)
    reader.take(4)
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        (dtype,) = reader.unpack("<B")
        if dtype != DTYPE_F64:
            raise FormatError(f"tensor {name!r} has unsupported dtype code {dtype}")
        n = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(8 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if reader.pos != len(body):
        raise FormatError("trailing bytes after the last tensor")
    return _model_from_tensors(tensors)


def _model_from_tensors(tensors: dict[str, np.ndarray]) -> Model:
    def get(name, shape):
        if name not in tensors:
            raise FormatError(f"missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        return arr

    header = get("config", (6,))
    try:
        config = ModelConfig(
            int(header[0]), int(header[1]), int(header[2]), int(header[3]),
            float(header[4]), float(header[5]),
        ).validate()
    except (ConfigError, ValueError, OverflowError) as exc:
        raise FormatError(f"invalid model config in checkpoint: {exc}") from None
    dims = [config.input_dim] + [config.width] * config.depth + [config.num_classes]
    dense = [
        DenseLayer(get(f"dense.{i}.weight", (o, k)), get(f"dense.{i}.bias", (o,)))
        for i, (k, o) in enumerate(zip(dims[:-1], dims[1:]))
    ]
    w = (config.width,)
    bn = [
        BatchNormLayer(
            get(f"bn.{i}.gamma", w),
            get(f"bn.{i}.beta", w),
            get(f"bn.{i}.running_mean", w),
            get(f"bn.{i}.running_var", w),
            float(get(f"bn.{i}.epsilon", (1,))[0]),
        )
        for i in range(config.depth)
    ]
    expected = 1 + 2 * len(dense) + 5 * len(bn)
    if len(tensors) != expected:
        raise FormatError(f"checkpoint holds {len(tensors)} tensors, expected {expected}")
    return Model(config, dense, bn)


def load_checkpoint(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())
