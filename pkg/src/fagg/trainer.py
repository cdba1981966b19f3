"""Mini-batch SGD with momentum for the aggregation module and margin head.

Aggregation parameters start at zero, so before the first update the model is
exactly normalized average pooling. In cascaded mode an all-zero network is a
stationary point (every aggregation gradient vanishes when Q2 = 0 and the
hidden activations are 0), so the first-block kernel is given a seeded random
start while Q2, b1 and b2 stay zero; the output is still average pooling
because the second block maps everything to 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fagg.attention import AttentionParams, Mode
from fagg.core import FeatureSet
from fagg.grad import MarginHead, backward
from fagg.synth import LabeledCorpus, make_rng

log = logging.getLogger(__name__)

PARAM_NAMES = ("q1", "b1", "q2", "b2")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 16
    epochs: int = 10
    frames_min: int = 8
    frames_max: int = 8
    seed: int = 0
    mode: Mode = Mode.CASCADED
    margin: float = 0.5
    scale: float = 8.0
    momentum: float = 0.9
    # tie all rows of the last block: one weight per frame, shared by every dimension
    frame_level: bool = False
    # std of the first-block kernel at start is block1_init_scale / sqrt(M); cascaded mode only
    block1_init_scale: float = 1.0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    params: AttentionParams
    head: MarginHead
    epoch: int = 0
    running_loss: float = float("nan")
    rng_state: dict | None = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    frame_level: bool = False

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.params.copy(), self.head.copy(), self.epoch, self.running_loss,
            None if self.rng_state is None else _copy_state(self.rng_state),
            {k: v.copy() for k, v in self.velocity.items()}, self.frame_level,
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, int, float]]


def _copy_state(state: dict) -> dict:
    return {k: (dict(v) if isinstance(v, dict) else v) for k, v in state.items()}


def init_zero(dim: int, num_classes: int, seed: int = 0, mode: Mode = Mode.CASCADED,
              margin: float = 0.5, scale: float = 8.0):
    """All-zero aggregation parameters and a seeded random unit-row margin head."""
    if dim < 1 or num_classes < 1:
        raise ValueError("dim and num_classes must be >= 1")
    head = MarginHead.random(num_classes, dim, make_rng(seed), margin, scale)
    return AttentionParams.zeros(dim, Mode(mode)), head


def sample_frames(s: FeatureSet, cfg: TrainConfig, rng: np.random.Generator) -> FeatureSet:
    k = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    if s.num_frames >= k:
        idx = np.sort(rng.choice(s.num_frames, size=k, replace=False))
    else:
        idx = rng.integers(0, s.num_frames, size=k)
    return s.with_frames(s.frames[idx])


def _tie_rows(grads: dict, mode: Mode):
    """Gradient of a shared row: sum over rows, broadcast back so rows stay equal."""
    if mode is Mode.LINEAR:
        grads["q1"] = np.broadcast_to(grads["q1"].sum(axis=0), grads["q1"].shape).copy()
    else:
        grads["q2"] = np.broadcast_to(grads["q2"].sum(axis=0), grads["q2"].shape).copy()
        grads["b2"] = np.full_like(grads["b2"], grads["b2"].sum())


def fresh_checkpoint(corpus: LabeledCorpus, cfg: TrainConfig) -> Checkpoint:
    dim = corpus.dim
    params, head = init_zero(dim, corpus.num_classes, cfg.seed, cfg.mode, cfg.margin, cfg.scale)
    rng = make_rng(cfg.seed + 1)
    if cfg.mode is Mode.CASCADED and cfg.block1_init_scale > 0:
        params.q1 = rng.standard_normal(params.q1.shape) * (cfg.block1_init_scale / np.sqrt(dim))
    return Checkpoint(params, head, 0, float("nan"), rng.bit_generator.state, frame_level=cfg.frame_level)


def _run(ckpt: Checkpoint, sets: list[FeatureSet], cfg: TrainConfig, stop_epoch: int) -> TrainResult:
    params, head = ckpt.params, ckpt.head
    mode = params.mode
    rng = make_rng(0)
    rng.bit_generator.state = ckpt.rng_state
    names = ("q1",) if mode is Mode.LINEAR else PARAM_NAMES
    velocity = ckpt.velocity or {}
    for name in (*names, "class_weights"):
        ref = head.class_weights if name == "class_weights" else getattr(params, name)
        if name not in velocity or velocity[name].shape != ref.shape:
            velocity[name] = np.zeros_like(ref)

    history: list[tuple[int, int, float]] = []
    n = len(sets)
    for epoch in range(ckpt.epoch, stop_epoch):
        order = rng.permutation(n)
        epoch_losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            acc = {name: 0.0 for name in (*names, "class_weights")}
            loss = 0.0
            # sequential accumulation keeps the reduction order fixed
            for i in batch:
                s = sample_frames(sets[i], cfg, rng)
                bundle = backward(s, params, head, s.label)
                g = bundle.arrays()
                for name in acc:
                    acc[name] = acc[name] + g[name]
                loss += bundle.loss
            grads = {name: v / len(batch) for name, v in acc.items()}
            loss /= len(batch)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, batch {b} (loss={loss})")
            if ckpt.frame_level:
                _tie_rows(grads, mode)
            for name, grad in grads.items():
                velocity[name] = cfg.momentum * velocity[name] + grad
                if name == "class_weights":
                    head.class_weights = head.class_weights - cfg.learning_rate * velocity[name]
                else:
                    setattr(params, name, getattr(params, name) - cfg.learning_rate * velocity[name])
            if cfg.learning_rate > 0:
                head.renormalize()
            history.append((epoch, b, loss))
            epoch_losses.append(loss)
        ckpt.epoch = epoch + 1
        ckpt.running_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        log.info("epoch %d mean loss %.6f", epoch, ckpt.running_loss)
    ckpt.rng_state = rng.bit_generator.state
    ckpt.velocity = velocity
    return TrainResult(ckpt, history)


def _check_corpus(corpus: LabeledCorpus, head: MarginHead):
    if not corpus.sets:
        raise ValueError("empty corpus")
    bad = [s.set_id for s in corpus.sets if s.label >= head.num_classes]
    if bad:
        raise ValueError(f"labels out of range for {head.num_classes} classes: {bad[:5]}")


def train(corpus: LabeledCorpus, cfg: TrainConfig, resume: Checkpoint | None = None) -> TrainResult:
    """Train until ``cfg.epochs`` epochs have run in total (resuming counts earlier epochs)."""
    ckpt = resume.copy() if resume is not None else fresh_checkpoint(corpus, cfg)
    if ckpt.params.dim != corpus.dim:
        raise ValueError(f"corpus dim {corpus.dim} does not match parameter dim {ckpt.params.dim}")
    _check_corpus(corpus, ckpt.head)
    return _run(ckpt, corpus.sets, cfg, cfg.epochs)


def finetune(ckpt: Checkpoint, corpus: LabeledCorpus, cfg: TrainConfig) -> TrainResult:
    """Run ``cfg.epochs`` more epochs on another corpus, carrying the aggregation parameters.

    With a different class count the margin head (and its momentum) is re-drawn from ``cfg.seed``.
    """
    if corpus.dim != ckpt.params.dim:
        raise ValueError(f"corpus dim {corpus.dim} does not match parameter dim {ckpt.params.dim}")
    ckpt = ckpt.copy()
    if corpus.num_classes != ckpt.head.num_classes:
        ckpt.head = MarginHead.random(corpus.num_classes, corpus.dim, make_rng(cfg.seed), cfg.margin, cfg.scale)
        ckpt.velocity.pop("class_weights", None)
    if ckpt.rng_state is None:
        ckpt.rng_state = make_rng(cfg.seed + 1).bit_generator.state
    _check_corpus(corpus, ckpt.head)
    return _run(ckpt, corpus.sets, cfg, ckpt.epoch + cfg.epochs)
