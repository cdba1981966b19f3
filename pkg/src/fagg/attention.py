"""Dimension-wise attention aggregation.

Each frame ``F_k`` gets a significance vector ``E_k`` (one score per feature
dimension). Scores are softmaxed over frames separately for every dimension and
the frames are combined with an element-wise weighted sum::

    linear:    E_k = Q1 F_k
    cascaded:  E_k = tanh(Q2 tanh(Q1 F_k + b1) + b2)
    A[m, :]  = softmax_k(E[m, :])
    r[m]     = sum_k A[m, k] F_k[m]
    template = r / |r|

Matrices follow the (M, K) layout: column k belongs to frame k.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from fagg.core import FeatureSet, l2_normalize, stable_softmax


class Mode(enum.Enum):
    LINEAR = "linear"
    CASCADED = "cascaded"

    @property
    def tag(self) -> int:
        return 0 if self is Mode.LINEAR else 1

    @classmethod
    def from_tag(cls, tag: int) -> "Mode":
        if tag == 0:
            return cls.LINEAR
        if tag == 1:
            return cls.CASCADED
        raise ValueError(f"unknown mode tag {tag}")


@dataclass
class AttentionParams:
    q1: np.ndarray
    b1: np.ndarray
    q2: np.ndarray
    b2: np.ndarray
    mode: Mode = Mode.CASCADED

    def __post_init__(self):
        self.mode = Mode(self.mode)
        for name in ("q1", "b1", "q2", "b2"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        if self.q1.ndim != 2:
            raise ValueError("q1 must be a matrix")
        m = self.q1.shape[0]
        if self.q1.shape != (m, m) or self.q2.shape != (m, m):
            raise ValueError(f"kernels must be square M x M, got {self.q1.shape} and {self.q2.shape}")
        if self.b1.shape != (m,) or self.b2.shape != (m,):
            raise ValueError(f"biases must have length {m}, got {self.b1.shape} and {self.b2.shape}")
        for name in ("q1", "b1", "q2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        if self.mode is Mode.LINEAR and (self.b1.any() or self.q2.any() or self.b2.any()):
            raise ValueError("linear mode uses q1 only; b1, q2 and b2 must be zero")

    @property
    def dim(self) -> int:
        return self.q1.shape[1]

    @classmethod
    def zeros(cls, dim: int, mode: Mode = Mode.CASCADED) -> "AttentionParams":
        return cls(np.zeros((dim, dim)), np.zeros(dim), np.zeros((dim, dim)), np.zeros(dim), mode)

    @classmethod
    def linear(cls, q) -> "AttentionParams":
        q = np.asarray(q, dtype=np.float64)
        m = q.shape[0]
        return cls(q, np.zeros(m), np.zeros((m, m)), np.zeros(m), Mode.LINEAR)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"q1": self.q1, "b1": self.b1, "q2": self.q2, "b2": self.b2}

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.q1.copy(), self.b1.copy(), self.q2.copy(), self.b2.copy(), self.mode)


@dataclass
class ForwardCache:
    """Intermediates kept for the backward pass."""

    frames: np.ndarray  # (K, M)
    hidden: np.ndarray | None  # (M, K) output of the first block, cascaded mode only
    significance: np.ndarray  # (M, K)
    weights: np.ndarray  # (M, K)
    pooled: np.ndarray  # r, before normalization
    template: np.ndarray  # r / |r|


def _check_dims(s: FeatureSet, p: AttentionParams):
    if s.dim != p.dim:
        raise ValueError(f"frame dim {s.dim} does not match parameter dim {p.dim}")


def _significance(frames: np.ndarray, p: AttentionParams):
    x = frames.T  # (M, K)
    if p.mode is Mode.LINEAR:
        return None, p.q1 @ x
    hidden = np.tanh(p.q1 @ x + p.b1[:, None])
    return hidden, np.tanh(p.q2 @ hidden + p.b2[:, None])


def significance(s: FeatureSet, p: AttentionParams) -> np.ndarray:
    """Per-frame, per-dimension scores, shape (M, K)."""
    _check_dims(s, p)
    return _significance(s.frames, p)[1]


def weights_from_significance(e) -> np.ndarray:
    """Softmax across frames for each dimension; every row sums to one."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("significance must be an (M, K) matrix")
    if not np.all(np.isfinite(e)):
        raise ValueError("significance has non-finite entries")
    return stable_softmax(e, axis=1)


def aggregate(s: FeatureSet, a) -> np.ndarray:
    """Element-wise weighted sum ``r[m] = sum_k a[m, k] * F_k[m]``."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (s.dim, s.num_frames):
        raise ValueError(f"weight matrix shape {a.shape} does not match set shape (M={s.dim}, K={s.num_frames})")
    return np.einsum("mk,km->m", a, s.frames)


def forward_cache(s: FeatureSet, p: AttentionParams) -> ForwardCache:
    _check_dims(s, p)
    hidden, e = _significance(s.frames, p)
    a = stable_softmax(e, axis=1)
    r = aggregate(s, a)
    return ForwardCache(s.frames, hidden, e, a, r, l2_normalize(r))


def forward(s: FeatureSet, p: AttentionParams) -> np.ndarray:
    """Aggregate a set into one unit-norm template."""
    return forward_cache(s, p).template


def pooled(s: FeatureSet, p: AttentionParams) -> np.ndarray:
    """Aggregated vector before L2 normalization."""
    _check_dims(s, p)
    return aggregate(s, stable_softmax(_significance(s.frames, p)[1], axis=1))
