"""Verification and identification metrics.

Conventions (step ROC, no interpolation):

* a pair / probe is accepted at threshold ``t`` when its score is strictly
  greater than ``t``;
* TAR@FAR=f is the best true accept rate over all thresholds whose false
  accept fraction is <= f;
* TPIR@FPIR=f uses the smallest threshold at which at most a fraction f of the
  non-mated probes has a top score above it; a mated probe counts when its
  mate is ranked first and its score clears that threshold;
* rank of a mated probe = 1 + number of gallery templates scoring strictly
  higher than its mate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from fagg.attention import AttentionParams, forward
from fagg.core import FeatureSet, NanParams, avg_pool, l2_normalize, max_pool, nan_aggregate

DEFAULT_FAR = (0.001, 0.01, 0.1)
DEFAULT_RANKS = (1, 5, 10)
DEFAULT_FPIR = (0.01, 0.1)

Aggregator = Callable[[FeatureSet], np.ndarray]


def score(a, b, metric: str = "cosine") -> float:
    """Similarity, higher is better: cosine, or the negated euclidean distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == "cosine":
        return float(a @ b)
    if metric == "l2":
        return -float(np.linalg.norm(a - b))
    raise ValueError(f"unknown metric {metric!r}")


def score_matrix(a: np.ndarray, b: np.ndarray, metric: str = "cosine") -> np.ndarray:
    if metric == "cosine":
        return a @ b.T
    if metric == "l2":
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return -np.sqrt(np.maximum(d2, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def make_aggregator(method: str, params: AttentionParams | None = None, q=None) -> Aggregator:
    """Template builder for ``avg``, ``max``, ``nan`` (kernel ``q``) or ``attn`` (``params``).

    Every template is L2-normalized before it is scored.
    """
    if method == "avg":
        return lambda s: l2_normalize(avg_pool(s))
    if method == "max":
        return lambda s: l2_normalize(max_pool(s))
    if method == "nan":
        if q is None:
            raise ValueError("nan aggregation needs a kernel q")
        kernel = NanParams(q)
        return lambda s: l2_normalize(nan_aggregate(s, kernel))
    if method == "attn":
        if params is None:
            raise ValueError("attn aggregation needs AttentionParams")
        return lambda s: forward(s, params)
    raise ValueError(f"unknown aggregation method {method!r}")


# -- pairs ---------------------------------------------------------------


@dataclass
class PairList:
    pairs: list[tuple[str, str, bool]]

    def __post_init__(self):
        self.pairs = [(str(a), str(b), bool(same)) for a, b, same in self.pairs]

    def validate(self, known_ids: Iterable[str] | None = None):
        if not any(p[2] for p in self.pairs) or all(p[2] for p in self.pairs):
            raise ValueError("pair list needs at least one positive and one negative pair")
        if known_ids is not None:
            known = set(known_ids)
            missing = {x for a, b, _ in self.pairs for x in (a, b) if x not in known}
            if missing:
                raise KeyError(f"unknown set ids in pair list: {sorted(missing)[:5]}")

    def __len__(self):
        return len(self.pairs)


def all_pairs(sets: Sequence[FeatureSet]) -> PairList:
    out = []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            out.append((sets[i].set_id, sets[j].set_id, sets[i].label == sets[j].label))
    return PairList(out)


def sample_pairs(sets: Sequence[FeatureSet], n_pos: int, n_neg: int, rng: np.random.Generator) -> PairList:
    """Random distinct positive / negative pairs, positives first."""
    labels = np.array([s.label for s in sets])
    pos, neg = set(), set()
    n = len(sets)
    n_same = sum(int(c) * (int(c) - 1) // 2 for c in np.unique(labels, return_counts=True)[1])
    if n_same < n_pos or n * (n - 1) // 2 - n_same < n_neg:
        raise ValueError("corpus too small for the requested number of pairs")
    while len(pos) < n_pos or len(neg) < n_neg:
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        bucket = pos if labels[i] == labels[j] else neg
        limit = n_pos if bucket is pos else n_neg
        if len(bucket) < limit:
            bucket.add((i, j))
    order = sorted(pos) + sorted(neg)
    return PairList([(sets[i].set_id, sets[j].set_id, labels[i] == labels[j]) for i, j in order])


# -- verification ----------------------------------------------------------


def allowed_count(level: float, n: int) -> int:
    """Largest c in [0, n] with c / n <= level (same float comparison as a direct check)."""
    c = min(n, max(0, int(math.floor(level * n))))
    while c > 0 and c / n > level:
        c -= 1
    while c < n and (c + 1) / n <= level:
        c += 1
    return c


def threshold_at(neg: np.ndarray, level: float) -> float:
    """Smallest threshold t with mean(neg > t) <= level; -inf when every negative may pass."""
    n = len(neg)
    c = allowed_count(level, n)
    if c >= n:
        return -math.inf
    return float(np.sort(neg)[::-1][c])


def tar_at_far(pos, neg, far_levels=DEFAULT_FAR) -> dict[float, float]:
    pos, neg = _scores(pos, neg)
    return {float(f): float(np.mean(pos > threshold_at(neg, f))) for f in far_levels}


def _roc_counts(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FP, TP) counts of scores >= each distinct score, descending, starting at (0, 0)."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tp = pos.size - np.searchsorted(np.sort(pos), thresholds, side="left")
    fp = neg.size - np.searchsorted(np.sort(neg), thresholds, side="left")
    return np.concatenate([[0], fp]), np.concatenate([[0], tp])


def _scores(pos, neg):
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative score")
    return pos, neg


def roc_curve(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every distinct score, from (0, 0) to (1, 1)."""
    pos, neg = _scores(pos, neg)
    fp, tp = _roc_counts(pos, neg)
    return fp / neg.size, tp / pos.size


def roc_auc(pos, neg) -> float:
    """Trapezoidal area under the step ROC.

    Integrated on integer counts and divided once at the end, so the result
    is the exact rational value rounded a single time.
    """
    pos, neg = _scores(pos, neg)
    fp, tp = _roc_counts(pos, neg)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * pos.size * neg.size)


def pair_scores(templates: dict[str, np.ndarray], pairs: PairList, metric: str = "cosine"):
    pos, neg = [], []
    for a, b, same in pairs.pairs:
        (pos if same else neg).append(score(templates[a], templates[b], metric))
    return np.array(pos), np.array(neg)


def build_templates(sets: Iterable[FeatureSet], aggregator: Aggregator) -> dict[str, np.ndarray]:
    return {s.set_id: aggregator(s) for s in sets}


def verify(corpus, pairs: PairList, aggregator: Aggregator, far_levels=DEFAULT_FAR, metric: str = "cosine"):
    """Returns ``(tar_at_far, auc)`` for the pairs; ``corpus`` is a LabeledCorpus or a list of sets."""
    sets = corpus.sets if hasattr(corpus, "sets") else list(corpus)
    by_id = {s.set_id: s for s in sets}
    pairs.validate(by_id)
    needed = {x for a, b, _ in pairs.pairs for x in (a, b)}
    templates = build_templates((by_id[i] for i in sorted(needed)), aggregator)
    pos, neg = pair_scores(templates, pairs, metric)
    return tar_at_far(pos, neg, far_levels), roc_auc(pos, neg)


# -- identification --------------------------------------------------------


def identify_from_scores(scores, gallery_labels, probe_labels, ranks=DEFAULT_RANKS, fpir_levels=DEFAULT_FPIR):
    """Rank-N and open-set TPIR@FPIR from a (P, G) score matrix.

    Probes whose identity is not in the gallery are the non-mated probes.
    With no non-mated probes the threshold is -inf (closed-set TPIR = rank-1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    if gallery_labels.size == 0:
        raise ValueError("empty gallery")
    if len(set(gallery_labels.tolist())) != gallery_labels.size:
        raise ValueError("gallery identities must be unique per template")
    col = {int(g): i for i, g in enumerate(gallery_labels)}
    mated = np.array([int(p) in col for p in probe_labels], dtype=bool)
    if not mated.any():
        raise ValueError("no mated probes")

    mated_rows = scores[mated]
    mate_idx = np.array([col[int(p)] for p in probe_labels[mated]])
    mate_scores = mated_rows[np.arange(len(mate_idx)), mate_idx]
    rank = 1 + np.sum(mated_rows > mate_scores[:, None], axis=1)
    rank_n = {int(n): float(np.mean(rank <= n)) for n in ranks}

    nonmated_top = scores[~mated].max(axis=1) if (~mated).any() else np.array([])
    tpir = {}
    for f in fpir_levels:
        t = threshold_at(nonmated_top, f) if nonmated_top.size else -math.inf
        tpir[float(f)] = float(np.mean((rank == 1) & (mate_scores > t)))
    return rank_n, tpir


def identify(gallery: Sequence[FeatureSet], probes: Sequence[FeatureSet], aggregator: Aggregator,
             ranks=DEFAULT_RANKS, fpir_levels=DEFAULT_FPIR, metric: str = "cosine"):
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    g = np.stack([aggregator(s) for s in gallery])
    p = np.stack([aggregator(s) for s in probes])
    return identify_from_scores(
        score_matrix(p, g, metric), [s.label for s in gallery], [s.label for s in probes], ranks, fpir_levels
    )


# -- reports -----------------------------------------------------------------


@dataclass
class EvalReport:
    tar_at_far: dict[float, float] = field(default_factory=dict)
    auc: float | None = None
    rank_n: dict[int, float] = field(default_factory=dict)
    tpir_at_fpir: dict[float, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def check(self):
        vals = [*self.tar_at_far.values(), *self.rank_n.values(), *self.tpir_at_fpir.values()]
        if self.auc is not None:
            vals.append(self.auc)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise AssertionError("metric outside [0, 1]")
        for series in (self.tar_at_far, self.rank_n):
            ordered = [series[k] for k in sorted(series)]
            if any(b < a for a, b in zip(ordered, ordered[1:])):
                raise AssertionError("metric not monotone in its operating point")
        return self

    def items(self) -> list[tuple[str, float]]:
        out = [(f"TAR@FAR={f:g}", v) for f, v in sorted(self.tar_at_far.items())]
        if self.auc is not None:
            out.append(("AUC", self.auc))
        out += [(f"rank-{n}", v) for n, v in sorted(self.rank_n.items())]
        out += [(f"TPIR@FPIR={f:g}", v) for f, v in sorted(self.tpir_at_fpir.items())]
        return out

    def to_lines(self) -> str:
        """One ``metric<TAB>value`` line per metric (std lines as ``<metric>:std``)."""
        lines = []
        for key, value in self.items():
            lines.append(f"{key}\t{value:.6f}")
            if key in self.std:
                lines.append(f"{key}:std\t{self.std[key]:.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = self.items()
        width = max(len(k) for k, _ in rows) if rows else 6
        out = [f"{'metric':<{width}}  value"]
        for key, value in rows:
            cell = f"{value:.4f}"
            if key in self.std:
                cell += f" +/- {self.std[key]:.4f}"
            out.append(f"{key:<{width}}  {cell}")
        return "\n".join(out) + "\n"


def verify_folds(corpus, folds: Sequence[PairList], aggregator: Aggregator, far_levels=DEFAULT_FAR,
                 metric: str = "cosine") -> EvalReport:
    """Per-fold thresholds; the report holds the mean over folds and the std in ``report.std``."""
    per_fold = [verify(corpus, pairs, aggregator, far_levels, metric) for pairs in folds]
    tars = {f: [t[f] for t, _ in per_fold] for f in far_levels}
    aucs = [a for _, a in per_fold]
    report = EvalReport({float(f): float(np.mean(v)) for f, v in tars.items()}, float(np.mean(aucs)))
    report.std = {f"TAR@FAR={f:g}": float(np.std(v)) for f, v in tars.items()}
    report.std["AUC"] = float(np.std(aucs))
    return report
