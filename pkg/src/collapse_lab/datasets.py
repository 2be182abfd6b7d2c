"""Synthetic classification tasks and an IDX (MNIST-style) reader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import make_rng
from .errors import ConfigError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_CENTER_DRAWS = 10_000


@dataclass
class Dataset:
    features: np.ndarray  # (n, input_dim)
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InputError("features and labels disagree in length")
        if self.features.shape[0] < 1:
            raise InputError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError("labels out of range")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features must be finite")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.num_classes, self.split)


def _blob_centers(C: int, input_dim: int, separation: float, noise_sigma: float, seed: int):
    rng = make_rng(seed, "blobs/centers")
    unit = noise_sigma if noise_sigma > 0 else 1.0
    # Isotropic draws whose expected pairwise distance is sqrt(2) * separation * unit.
    scale = separation * unit / np.sqrt(input_dim)
    min_dist = separation * noise_sigma
    centers: list[np.ndarray] = []
    draws = 0
    while len(centers) < C:
        if draws >= MAX_CENTER_DRAWS:
            raise ConfigError(
                f"could not place {C} centers {min_dist} apart after {MAX_CENTER_DRAWS} draws"
            )
        draws += 1
        candidate = rng.standard_normal(input_dim) * scale
        if all(np.linalg.norm(candidate - c) >= min_dist for c in centers):
            centers.append(candidate)
    return np.stack(centers)


def gen_blobs(n_per_class: int, C: int, input_dim: int, separation: float,
              noise_sigma: float, seed: int, split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters around seeded centers.

    Centers depend only on ``seed`` so that splits drawn with different
    ``split`` labels share them; the points of each split come from their own
    stream. Rows are ordered by class.
    """
    if n_per_class < 1 or C < 1 or input_dim < 1:
        raise ConfigError("n_per_class, C and input_dim must be positive")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    centers = _blob_centers(C, input_dim, separation, noise_sigma, seed)
    rng = make_rng(seed, f"blobs/points/{split}")
    noise = rng.standard_normal((C, n_per_class, input_dim)) * noise_sigma
    features = (centers[:, None, :] + noise).reshape(C * n_per_class, input_dim)
    labels = np.repeat(np.arange(C, dtype=np.int64), n_per_class)
    return Dataset(features, labels, C, split)


def gen_spirals(n_per_class: int, C: int, turns: float, noise_sigma: float, seed: int,
                input_dim: int = 2, split: str = "train") -> Dataset:
    """Interleaved Archimedean spirals in the plane, zero-padded to ``input_dim``.

    Class ``c`` follows radius ``t`` and angle ``2*pi*(turns*t + c/C)`` for
    ``t`` evenly spaced on ``[0.05, 1]``.
    """
    if C < 2:
        raise ConfigError("spirals need at least two classes")
    if turns <= 0:
        raise ConfigError("turns must be positive")
    if n_per_class < 1 or input_dim < 2:
        raise ConfigError("n_per_class must be positive and input_dim >= 2")
    rng = make_rng(seed, f"spirals/noise/{split}")
    t = np.linspace(0.05, 1.0, n_per_class)
    blocks = []
    for c in range(C):
        angle = 2.0 * np.pi * (turns * t + c / C)
        xy = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        blocks.append(xy)
    xy = np.concatenate(blocks) + rng.standard_normal((C * n_per_class, 2)) * noise_sigma
    features = np.zeros((C * n_per_class, input_dim))
    features[:, :2] = xy
    labels = np.repeat(np.arange(C, dtype=np.int64), n_per_class)
    return Dataset(features, labels, C, split)


def _read_idx(path, magic: int, header_words: int):
    data = Path(path).read_bytes()
    if len(data) < 4 * header_words:
        raise FormatError(f"{path}: truncated header")
    words = struct.unpack(f">{header_words}I", data[: 4 * header_words])
    if words[0] != magic:
        raise FormatError(f"{path}: bad magic 0x{words[0]:08x}, expected 0x{magic:08x}")
    return words[1:], data[4 * header_words :]


def read_idx_images(path) -> np.ndarray:
    (count, rows, cols), payload = _read_idx(path, IDX_IMAGES_MAGIC, 4)
    expected = count * rows * cols
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    (count,), payload = _read_idx(path, IDX_LABELS_MAGIC, 2)
    if len(payload) != count:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {count}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path, normalize: bool = True, reference=None,
             num_classes: int | None = None, split: str = "train"):
    """Load an IDX image/label pair as a flattened ``Dataset``.

    Pixels are scaled to [0, 1]. With ``normalize`` each feature is then
    standardised using ``reference = (mean, std)`` if given, else the file's
    own statistics (pass the training split's statistics when loading eval
    data). Returns ``(dataset, (mean, std))``; the pair is None when
    ``normalize`` is false.
    """
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    features = pixels.astype(np.float64) / 255.0
    stats = None
    if normalize:
        if reference is None:
            mean = features.mean(axis=0)
            std = features.std(axis=0)
            std = np.where(std > 0, std, 1.0)
            reference = (mean, std)
        stats = reference
        features = (features - reference[0]) / reference[1]
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    return Dataset(features, labels, num_classes, split), stats


def write_idx_images(path, images: np.ndarray) -> None:
    """Write ``(count, rows, cols)`` uint8 images as an IDX file."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
