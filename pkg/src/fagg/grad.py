"""Additive angular margin head and hand-written gradients for the aggregator.

The loss for a unit-norm template ``t`` with label ``y`` is the cross-entropy
over logits ``s*cos(theta_y + m)`` (true class) and ``s*cos(theta_j)`` (others),
where ``cos(theta_j) = w_j . t`` for unit class rows ``w_j``.

Backward path: loss -> cosines -> template -> L2 normalization -> per-dimension
softmax over frames -> significance blocks -> (Q1, b1, Q2, b2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fagg.attention import AttentionParams, Mode, forward_cache
from fagg.core import FeatureSet, stable_softmax

COS_EPS = 1e-7


@dataclass
class MarginHead:
    class_weights: np.ndarray  # (C, M), unit rows
    margin: float = 0.5
    scale: float = 64.0

    def __post_init__(self):
        self.class_weights = np.array(self.class_weights, dtype=np.float64)
        if self.class_weights.ndim != 2:
            raise ValueError("class_weights must be a (C, M) matrix")
        if not np.all(np.isfinite(self.class_weights)):
            raise ValueError("class_weights has non-finite entries")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[0]

    @property
    def dim(self) -> int:
        return self.class_weights.shape[1]

    @classmethod
    def random(cls, num_classes: int, dim: int, rng: np.random.Generator, margin=0.5, scale=64.0):
        w = rng.standard_normal((num_classes, dim))
        return cls(normalize_rows(w), margin, scale)

    def renormalize(self):
        self.class_weights = normalize_rows(self.class_weights)

    def copy(self) -> "MarginHead":
        return MarginHead(self.class_weights.copy(), self.margin, self.scale)


@dataclass
class GradientBundle:
    d_q1: np.ndarray
    d_b1: np.ndarray
    d_q2: np.ndarray
    d_b2: np.ndarray
    d_class_weights: np.ndarray
    loss: float

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "q1": self.d_q1,
            "b1": self.d_b1,
            "q2": self.d_q2,
            "b2": self.d_b2,
            "class_weights": self.d_class_weights,
        }


def normalize_rows(w: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero class-weight row")
    return w / norms


def _margin_logits(cos: np.ndarray, label: int, margin: float, scale: float):
    """Logits and d(logit_y)/d(cos_y).

    ``cos(theta + m)`` is expanded as ``c cos m - sqrt(1 - c^2) sin m`` with c
    clamped to [-1 + eps, 1 - eps]; identical to going through acos, but exact
    when m = 0.
    """
    c = cos[label]
    cc = min(max(c, -1.0 + COS_EPS), 1.0 - COS_EPS)
    sin_t = math.sqrt(1.0 - cc * cc)
    sin_m, cos_m = math.sin(margin), math.cos(margin)
    logits = scale * cos.copy()
    if margin != 0.0:
        logits[label] = scale * (cc * cos_m - sin_t * sin_m)
        clamped = cc != c
        dy = 0.0 if clamped else scale * (cos_m + cc * sin_m / sin_t)
    else:
        dy = scale
    return logits, dy


def _check_label(label: int, num_classes: int):
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range for {num_classes} classes")


def _cross_entropy(logits: np.ndarray, label: int) -> float:
    shift = logits.max()
    return float(shift + math.log(np.exp(logits - shift).sum()) - logits[label])


def margin_loss_from_cosines(cos, label: int, margin: float, scale: float) -> float:
    cos = np.asarray(cos, dtype=np.float64)
    _check_label(label, cos.shape[0])
    logits, _ = _margin_logits(cos, label, margin, scale)
    return _cross_entropy(logits, label)


def margin_loss(template, label: int, head: MarginHead) -> float:
    """Cross-entropy of the additive-angular-margin logits; ``template`` must be unit norm."""
    template = np.asarray(template, dtype=np.float64)
    return margin_loss_from_cosines(head.class_weights @ template, label, head.margin, head.scale)


def backward(s: FeatureSet, p: AttentionParams, head: MarginHead, label: int) -> GradientBundle:
    """Exact gradients of ``margin_loss(forward(s, p), label, head)``."""
    _check_label(label, head.num_classes)
    if head.dim != p.dim:
        raise ValueError(f"head dim {head.dim} does not match parameter dim {p.dim}")
    fc = forward_cache(s, p)
    t = fc.template
    w = head.class_weights

    cos = w @ t
    logits, dy = _margin_logits(cos, label, head.margin, head.scale)
    prob = stable_softmax(logits)
    loss = _cross_entropy(logits, label)
    d_logits = prob.copy()
    d_logits[label] -= 1.0
    d_cos = head.scale * d_logits
    d_cos[label] = dy * d_logits[label]

    d_w = np.outer(d_cos, t)
    d_t = w.T @ d_cos
    # Jacobian of r -> r/|r| is (I - t t^T) / |r|
    d_r = (d_t - t * (t @ d_t)) / np.linalg.norm(fc.pooled)

    x = fc.frames.T  # (M, K)
    a = fc.weights
    d_a = d_r[:, None] * x
    # row-wise softmax Jacobian: dA/dE = a_k (delta_kj - a_j)
    d_e = a * (d_a - np.sum(d_a * a, axis=1, keepdims=True))

    m = p.dim
    if p.mode is Mode.LINEAR:
        return GradientBundle(d_e @ fc.frames, np.zeros(m), np.zeros((m, m)), np.zeros(m), d_w, loss)

    e, h = fc.significance, fc.hidden
    d_z2 = d_e * (1.0 - e * e)
    d_q2 = d_z2 @ h.T
    d_b2 = d_z2.sum(axis=1)
    d_z1 = (p.q2.T @ d_z2) * (1.0 - h * h)
    d_q1 = d_z1 @ fc.frames
    d_b1 = d_z1.sum(axis=1)
    return GradientBundle(d_q1, d_b1, d_q2, d_b2, d_w, loss)


def central_diff(f, x, h: float = 1e-5, dtype=np.float64) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape), returned as float64."""
    x = np.array(x, dtype=dtype)
    h = dtype(h)
    grad = np.zeros(x.shape)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        grad.flat[i] = (fp - fm) / (2 * h)
    return grad


def reference_loss(frames, arrays: dict, mode: Mode, label: int, margin: float, scale: float, dtype=np.longdouble):
    """Straight-line loss evaluation used only by the difference oracle.

    Shares no code with ``forward_cache``/``backward`` and goes through
    ``acos`` explicitly. Extended precision by default so that round-off
    (~eps * |loss| / h) stays far below the gradients being checked.
    """
    x = np.asarray(frames, dtype=dtype).T
    q1 = np.asarray(arrays["q1"], dtype=dtype)
    if mode is Mode.LINEAR:
        e = q1 @ x
    else:
        b1, q2, b2 = (np.asarray(arrays[k], dtype=dtype) for k in ("b1", "q2", "b2"))
        e = np.tanh(q2 @ np.tanh(q1 @ x + b1[:, None]) + b2[:, None])
    ex = np.exp(e - e.max(axis=1, keepdims=True))
    a = ex / ex.sum(axis=1, keepdims=True)
    r = (a * x).sum(axis=1)
    t = r / np.sqrt((r * r).sum())
    cos = np.asarray(arrays["class_weights"], dtype=dtype) @ t
    logits = scale * cos
    c = np.clip(cos[label], -1 + COS_EPS, 1 - COS_EPS)
    logits[label] = scale * np.cos(np.arccos(c) + margin) if margin != 0 else scale * cos[label]
    top = logits.max()
    return top + np.log(np.exp(logits - top).sum()) - logits[label]


def numeric_gradients(s: FeatureSet, p: AttentionParams, head: MarginHead, label: int, h: float = 1e-5,
                      dtype=np.longdouble):
    """Central-difference gradients for every trainable array (linear mode: q1 and the head only)."""
    base = {**p.arrays(), "class_weights": head.class_weights}
    names = ["q1", "class_weights"] if p.mode is Mode.LINEAR else ["q1", "b1", "q2", "b2", "class_weights"]

    def loss_with(name):
        def f(value):
            arrs = dict(base)
            arrs[name] = value
            return reference_loss(s.frames, arrs, p.mode, label, head.margin, head.scale, dtype)

        return f

    return {name: central_diff(loss_with(name), base[name], h, dtype) for name in names}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check(s: FeatureSet, p: AttentionParams, head: MarginHead, label: int, h: float = 1e-5,
                      dtype=np.longdouble) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Error per entry is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    analytic = backward(s, p, head, label).arrays()
    numeric = numeric_gradients(s, p, head, label, h, dtype)
    return max(relative_error(analytic[name], numeric[name]) for name in numeric)
