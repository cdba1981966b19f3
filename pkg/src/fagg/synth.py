"""Synthetic identities with embedding-space degradation.

Every identity is a random point on the unit sphere. A frame is the centroid
plus isotropic gaussian noise; a degraded frame additionally has a random
subset of its dimensions overwritten by pure noise, so part of the frame is
junk while the remaining dimensions still carry identity information.

Randomness: PCG64 (numpy ``Generator``) for uniforms/integers, gaussians via
Box-Muller on PCG64 doubles so the normal stream is fixed by this module rather
than by numpy's internal sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fagg.core import DegenerateInputError, FeatureSet

PRNG_TAG = "pcg64+boxmuller"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normals; pairs (u1, u2) consumed in order, cos branch first."""
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u = rng.random(2 * pairs)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(2.0 * math.pi * u2)
    z[1::2] = radius * np.sin(2.0 * math.pi * u2)
    return z[:n].reshape(shape)


@dataclass
class SynthConfig:
    dim: int = 64
    num_identities: int = 50
    sets_per_identity: int = 20
    frames_min: int = 4
    frames_max: int = 12
    noise_sigma: float = 0.1
    degrade_fraction: float = 0.5
    corrupt_dims_fraction: float = 0.5
    corrupt_noise_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.num_identities < 1 or self.sets_per_identity < 1:
            raise ValueError("dim, num_identities and sets_per_identity must be >= 1")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        if self.noise_sigma < 0 or self.corrupt_noise_sigma < 0:
            raise ValueError("noise sigmas must be nonnegative")
        for name in ("degrade_fraction", "corrupt_dims_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class LabeledCorpus:
    sets: list[FeatureSet]
    centroids: np.ndarray | None = None
    # diagnostics only, never serialized: per set a (K, M) bool mask of corrupted entries
    corrupt_masks: list[np.ndarray] | None = field(default=None, repr=False)
    prng_tag: str = PRNG_TAG

    def __post_init__(self):
        if self.sets:
            dims = {s.dim for s in self.sets}
            if len(dims) != 1:
                raise ValueError(f"all sets must share one dimension, got {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.sets[0].dim

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sets], dtype=np.int64)

    @property
    def identities(self) -> list[int]:
        return sorted({s.label for s in self.sets})

    @property
    def num_classes(self) -> int:
        if self.centroids is not None:
            return self.centroids.shape[0]
        return max(s.label for s in self.sets) + 1

    def by_id(self) -> dict[str, FeatureSet]:
        return {s.set_id: s for s in self.sets}

    def subset(self, identities) -> "LabeledCorpus":
        keep = set(int(i) for i in identities)
        idx = [i for i, s in enumerate(self.sets) if s.label in keep]
        masks = [self.corrupt_masks[i] for i in idx] if self.corrupt_masks is not None else None
        return LabeledCorpus([self.sets[i] for i in idx], self.centroids, masks, self.prng_tag)


def generate(cfg: SynthConfig) -> LabeledCorpus:
    rng = make_rng(cfg.seed)
    m = cfg.dim
    centroids = box_muller(rng, (cfg.num_identities, m))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    n_corrupt = int(round(cfg.corrupt_dims_fraction * m))

    sets, masks = [], []
    for ident in range(cfg.num_identities):
        for j in range(cfg.sets_per_identity):
            k = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
            frames = centroids[ident] + cfg.noise_sigma * box_muller(rng, (k, m))
            degraded = rng.random(k) < cfg.degrade_fraction
            mask = np.zeros((k, m), dtype=bool)
            for f in np.flatnonzero(degraded):
                dims = rng.permutation(m)[:n_corrupt]
                mask[f, dims] = True
                frames[f, dims] = cfg.corrupt_noise_sigma * box_muller(rng, n_corrupt)
            norms = np.linalg.norm(frames, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise DegenerateInputError(f"identity {ident} set {j}: a frame collapsed to zero")
            sets.append(FeatureSet(frames / norms, ident, f"id{ident:04d}_s{j:03d}"))
            masks.append(mask)
    return LabeledCorpus(sets, centroids, masks)


def split(corpus: LabeledCorpus, folds: int) -> list[tuple[LabeledCorpus, LabeledCorpus]]:
    """Identity-disjoint k-fold partitions; fold i tests on the i-th contiguous block of sorted identities."""
    ids = corpus.identities
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if len(ids) < folds:
        raise ValueError(f"{len(ids)} identities cannot fill {folds} identity-disjoint folds")
    blocks = np.array_split(np.array(ids), folds)
    out = []
    for block in blocks:
        test_ids = set(block.tolist())
        train_ids = [i for i in ids if i not in test_ids]
        out.append((corpus.subset(train_ids), corpus.subset(sorted(test_ids))))
    return out
