"""Basic types and the reference aggregators (average, max, frame-level attention)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an input has no direction (zero norm) or is otherwise unusable."""


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Frames of one video / image set, stored as a (K, M) float64 array."""

    frames: np.ndarray
    label: int = 0
    set_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[None, :]
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"frames must be a non-empty (K, M) array, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"set {self.set_id!r} has non-finite frame entries")
        if int(self.label) < 0:
            raise ValueError("label must be a nonnegative integer")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "label", int(self.label))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames) -> "FeatureSet":
        return FeatureSet(frames, self.label, self.set_id)

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.label == other.label
            and self.set_id == other.set_id
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )


@dataclass(frozen=True)
class NanParams:
    """Single kernel vector of frame-level attention."""

    q: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        object.__setattr__(self, "q", as_vector(self.q))


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    norm = np.linalg.norm(v)
    if 1e-150 < norm < 1e150:
        return v / norm
    # the squared norm under/overflowed: pre-scale by the largest entry
    peak = np.max(np.abs(v))
    if peak == 0.0:
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    w = v / peak
    return w / np.linalg.norm(w)


def stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    # max subtraction keeps exp() in range; weights are never raw exp ratios
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def avg_pool(s: FeatureSet) -> np.ndarray:
    return s.frames.mean(axis=0)


def max_pool(s: FeatureSet) -> np.ndarray:
    return s.frames.max(axis=0)


def nan_weights(s: FeatureSet, p: NanParams) -> np.ndarray:
    """Per-frame softmax weights ``a_k`` from scores ``q . F_k``."""
    if p.q.shape[0] != s.dim:
        raise ValueError(f"kernel length {p.q.shape[0]} does not match frame dim {s.dim}")
    return stable_softmax(s.frames @ p.q)


def nan_aggregate(s: FeatureSet, p: NanParams) -> np.ndarray:
    """Frame-level attention: one scalar weight per frame, shared by all dimensions."""
    a = nan_weights(s, p)
    return a @ s.frames
