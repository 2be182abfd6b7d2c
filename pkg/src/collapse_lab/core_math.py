"""Numerical building blocks: seeded streams, mergeable statistics, SPD solves.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every routine
here is a pure function of its arguments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericError, ShapeError

# Above this block dimension the Fisher is never materialised.
DENSE_BLOCK_LIMIT = 1500


def as_tensor(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def derive_key(seed: int, label: str) -> int:
    """128-bit Philox key for the stream named ``label`` under ``seed``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    digest = hashlib.blake2b(
        seed.to_bytes(8, "little") + label.encode("utf-8"), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, label: str = "") -> np.random.Generator:
    """Counter-based generator for one consumer.

    Each consumer asks for its own stream by a stable label, so draws made by
    one stage never shift the draws seen by another.
    """
    return np.random.Generator(np.random.Philox(key=derive_key(int(seed), label)))


# ---------------------------------------------------------------------------
# Streaming statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamingStats:
    """Count, mean and summed squared deviations of a vector-valued stream.

    An accumulator built with no dimension adopts the dimension of the first
    values it sees.
    """

    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def empty(cls, dim: int | None = None) -> "StreamingStats":
        n = 0 if dim is None else int(dim)
        return cls(0, np.zeros(n), np.zeros(n))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def variance(self) -> np.ndarray:
        """Population variance (``m2 / count``)."""
        if self.count == 0:
            return np.zeros_like(self.m2)
        return self.m2 / self.count


def _as_samples(values) -> np.ndarray:
    arr = as_tensor(values)
    if arr.ndim == 1:
        return arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"expected a (samples, dim) array, got shape {arr.shape}")
    return arr


def _combine(na, mean_a, m2_a, nb, mean_b, m2_b) -> StreamingStats:
    # Chan et al. pairwise update
    n = na + nb
    delta = mean_b - mean_a
    mean = mean_a + delta * (nb / n)
    m2 = m2_a + m2_b + delta * delta * (na * nb / n)
    return StreamingStats(n, mean, np.maximum(m2, 0.0))


def stats_accumulate(acc: StreamingStats, values) -> StreamingStats:
    """Return ``acc`` extended by the rows of ``values``.

    A 1-D ``values`` is read as a sequence of scalar samples.
    """
    x = _as_samples(values)
    if acc.count == 0 and acc.dim == 0:
        acc = StreamingStats.empty(x.shape[1])
    if x.shape[1] != acc.dim:
        raise ShapeError(f"values have dimension {x.shape[1]}, accumulator has {acc.dim}")
    nb = x.shape[0]
    if nb == 0:
        return acc
    mean_b = x.mean(axis=0)
    m2_b = ((x - mean_b) ** 2).sum(axis=0)
    if acc.count == 0:
        return StreamingStats(nb, mean_b, m2_b)
    return _combine(acc.count, acc.mean, acc.m2, nb, mean_b, m2_b)


def stats_merge(a: StreamingStats, b: StreamingStats) -> StreamingStats:
    """Combine two accumulators as if one had seen both input streams."""
    if a.count == 0 and a.dim == 0:
        return b
    if b.count == 0 and b.dim == 0:
        return a
    if a.dim != b.dim:
        raise ShapeError(f"cannot merge accumulators of dimension {a.dim} and {b.dim}")
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    return _combine(a.count, a.mean, a.m2, b.count, b.mean, b.m2)


# ---------------------------------------------------------------------------
# Dense SPD solves
# ---------------------------------------------------------------------------

def cholesky_factor(A) -> tuple:
    A = as_tensor(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {A.shape}")
    scale = max(np.abs(A).max(initial=0.0), 1e-300)
    if np.abs(A - A.T).max(initial=0.0) > 1e-10 * scale:
        raise NumericError("matrix is not symmetric")
    try:
        return scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"matrix is not positive definite: {exc}") from None


def spd_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A`` via Cholesky."""
    A = as_tensor(A)
    B = as_tensor(B)
    if B.shape[0] != A.shape[0]:
        raise ShapeError(f"right-hand side has {B.shape[0]} rows, matrix is {A.shape}")
    factor = cholesky_factor(A)
    return scipy.linalg.cho_solve(factor, B, check_finite=False)


# ---------------------------------------------------------------------------
# Damped empirical Fisher blocks
# ---------------------------------------------------------------------------

@dataclass
class FisherBlock:
    """Damped empirical Fisher ``damping * I + grads.T @ grads / n`` for one layer.

    ``grads`` holds one per-sample gradient per row. The dense matrix is only
    built on request.
    """

    grads: np.ndarray
    damping: float
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.grads = np.atleast_2d(as_tensor(self.grads))
        if self.damping <= 0:
            raise ValueError("damping must be positive")

    @property
    def n(self) -> int:
        return self.grads.shape[0]

    @property
    def dim(self) -> int:
        return self.grads.shape[1]

    def fisher(self) -> np.ndarray:
        """Undamped ``(1/n) sum g g^T`` (cached)."""
        if self._dense is None:
            if self.n == 0:
                F = np.zeros((self.dim, self.dim))
            else:
                F = self.grads.T @ self.grads / self.n
                F = 0.5 * (F + F.T)
            self._dense = F
        return self._dense

    def damped(self) -> np.ndarray:
        F = self.fisher().copy()
        F[np.diag_indices_from(F)] += self.damping
        return F

    def diagonal(self) -> np.ndarray:
        """Diagonal of the damped matrix without materialising it."""
        if self.n == 0:
            return np.full(self.dim, self.damping)
        return (self.grads**2).sum(axis=0) / self.n + self.damping

    def columns(self, index) -> "FisherBlock":
        """Principal sub-block on the coordinates ``index``."""
        return FisherBlock(self.grads[:, index], self.damping)

    def use_dense(self, method: str = "auto") -> bool:
        if method == "auto":
            return self.dim <= DENSE_BLOCK_LIMIT
        if method not in ("dense", "lowrank"):
            raise ValueError(f"unknown solve method {method!r}")
        return method == "dense"

    def _inner_factor(self):
        # n x n capacitance matrix of the Woodbury identity
        M = self.grads @ self.grads.T
        M = 0.5 * (M + M.T)
        M[np.diag_indices_from(M)] += self.n * self.damping
        return cholesky_factor(M)

    def inverse_diagonal(self, method: str = "auto") -> np.ndarray:
        """Diagonal of the inverse of the damped matrix."""
        if self.n == 0:
            return np.full(self.dim, 1.0 / self.damping)
        if self.use_dense(method):
            factor = cholesky_factor(self.damped())
            inv = scipy.linalg.cho_solve(factor, np.eye(self.dim), check_finite=False)
            return np.diag(inv).copy()
        factor = self._inner_factor()
        solved = scipy.linalg.cho_solve(factor, self.grads, check_finite=False)
        return (1.0 - (self.grads * solved).sum(axis=0)) / self.damping


def fisher_inverse_vector(block: FisherBlock, v, method: str = "auto") -> np.ndarray:
    """Apply ``(damping * I + G^T G / n)^-1`` to ``v`` (a vector or column stack).

    Small blocks use a dense Cholesky solve; large blocks reduce to an
    ``n x n`` solve through the Woodbury identity.
    """
    v = as_tensor(v)
    if v.shape[0] != block.dim:
        raise ShapeError(f"vector has length {v.shape[0]}, Fisher block has dimension {block.dim}")
    if block.n == 0:
        return v / block.damping
    if block.use_dense(method):
        return spd_solve(block.damped(), v)
    G = block.grads
    inner = scipy.linalg.cho_solve(block._inner_factor(), G @ v, check_finite=False)
    return (v - G.T @ inner) / block.damping
