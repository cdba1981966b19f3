"""Acceptance criteria, one test per criterion.

Every test records a single ``PASS``/``FAIL`` line (printed in the terminal
summary) before asserting, so the verdict of each criterion is visible even
when the assertion fails.
"""

import time

import numpy as np

from conftest import ACCEPTANCE_RESULTS, random_set
from fagg import io
from fagg.attention import AttentionParams, Mode, forward, pooled, significance, weights_from_significance
from fagg.cli import main
from fagg.core import NanParams, avg_pool, nan_aggregate
from fagg.evaluation import all_pairs, identify_from_scores, make_aggregator, roc_auc, tar_at_far, verify
from fagg.grad import MarginHead, finite_diff_check
from fagg.synth import SynthConfig, generate, make_rng, split
from fagg.trainer import TrainConfig, train
from test_evaluation import brute_identify, brute_tar, mann_whitney_auc

# held-out AUCs from the first seeded run of the ordering experiment, pinned for regression
ORDERING_PINNED = {"avg": 0.969779, "nan": 0.935810, "attn": 0.960742}
PIN_TOLERANCE = 0.01


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    assert ok, line


def test_degeneration_to_average():
    rng = make_rng(100)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        s = random_set(rng, int(rng.integers(1, 13)), int(rng.integers(1, 65)))
        for mode in Mode:
            worst = max(worst, float(np.max(np.abs(pooled(s, AttentionParams.zeros(s.dim, mode)) - avg_pool(s)))))
    elapsed = time.perf_counter() - start
    record("degeneration to average pooling", worst <= 1e-9 and elapsed < 1.0,
           f"max deviation {worst:.1e} (tol 1e-9) over 100 sets x 2 modes, {elapsed:.2f}s (< 1 s)")


def test_degeneration_to_frame_attention():
    rng = make_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        s = random_set(rng, int(rng.integers(1, 13)), int(rng.integers(1, 65)))
        q = rng.standard_normal(s.dim) * 3.0
        got = pooled(s, AttentionParams.linear(np.tile(q, (s.dim, 1))))
        worst = max(worst, float(np.max(np.abs(got - nan_aggregate(s, NanParams(q))))))
    elapsed = time.perf_counter() - start
    record("degeneration to frame-level attention", worst <= 1e-9 and elapsed < 1.0,
           f"max deviation {worst:.1e} (tol 1e-9) over 100 sets, {elapsed:.2f}s (< 1 s)")


def test_order_invariance():
    rng = make_rng(102)
    start = time.perf_counter()
    worst = 0.0
    for i in range(50):
        m = int(rng.integers(2, 33))
        s = random_set(rng, int(rng.integers(2, 16)), m)
        mode = Mode.CASCADED if i % 2 == 0 else Mode.LINEAR
        if mode is Mode.LINEAR:
            p = AttentionParams.linear(rng.standard_normal((m, m)) * 2)
        else:
            p = AttentionParams(rng.standard_normal((m, m)) * 2, rng.standard_normal(m), rng.standard_normal((m, m)) * 2,
                                rng.standard_normal(m))
        ref = forward(s, p)
        perms = [np.arange(s.num_frames)[::-1]] + [rng.permutation(s.num_frames) for _ in range(9)]
        for perm in perms:
            worst = max(worst, float(np.max(np.abs(forward(s.with_frames(s.frames[perm]), p) - ref))))
    elapsed = time.perf_counter() - start
    record("order invariance", worst <= 1e-6 and elapsed < 5.0,
           f"max deviation {worst:.1e} (tol 1e-6) over 50 sets x 10 permutations, {elapsed:.2f}s (< 5 s)")


def test_weight_normalization():
    rng = make_rng(103)
    start = time.perf_counter()
    worst_sum, min_weight = 0.0, 1.0
    for i in range(1000):
        m, k = int(rng.integers(1, 33)), int(rng.integers(1, 20))
        s = random_set(rng, k, m)
        scale = float(10 ** rng.uniform(-3, 1))
        if i % 2:
            p = AttentionParams.linear(rng.standard_normal((m, m)) * scale)
        else:
            p = AttentionParams(*(rng.standard_normal(shape) * scale for shape in ((m, m), m, (m, m), m)))
        a = weights_from_significance(significance(s, p))
        worst_sum = max(worst_sum, float(np.max(np.abs(a.sum(axis=1) - 1.0))))
        min_weight = min(min_weight, float(a.min()))
    elapsed = time.perf_counter() - start
    record("weight normalization", worst_sum <= 1e-9 and min_weight > 0 and elapsed < 5.0,
           f"max |row sum - 1| {worst_sum:.1e} (tol 1e-9), min weight {min_weight:.1e} (> 0), "
           f"1000 inputs, {elapsed:.2f}s (< 5 s)")


def test_gradient_correctness():
    start = time.perf_counter()
    errors = []
    seed = 0
    for mode in Mode:
        for m in (4, 8, 16):
            for k in (1, 2, 5):
                for c in (2, 5):
                    rng = make_rng(seed)
                    seed += 1
                    s = random_set(rng, k, m, label=int(rng.integers(c)))
                    if mode is Mode.LINEAR:
                        p = AttentionParams.linear(rng.standard_normal((m, m)))
                    else:
                        p = AttentionParams(rng.standard_normal((m, m)), rng.standard_normal(m) * 0.5,
                                            rng.standard_normal((m, m)), rng.standard_normal(m) * 0.5)
                    head = MarginHead.random(c, m, rng, 0.5, 8.0)
                    errors.append(finite_diff_check(s, p, head, s.label, h=1e-5))
    elapsed = time.perf_counter() - start
    worst = max(errors)
    record("gradient correctness", worst < 1e-4 and len(errors) >= 20 and elapsed < 30.0,
           f"max relative error {worst:.1e} (< 1e-4) over {len(errors)} instances, {elapsed:.1f}s (< 30 s)")


def test_metric_oracles():
    start = time.perf_counter()
    mismatches = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        # 20 pairs with coarse scores so ties are common
        pos = np.round(rng.normal(0.6, 0.2, 10), 1)
        neg = np.round(rng.normal(0.3, 0.2, 10), 1)
        for f in (0.0, 0.001, 0.01, 0.1, 0.25, 0.5, 1.0):
            mismatches += tar_at_far(pos, neg, [f])[f] != brute_tar(pos.tolist(), neg.tolist(), f)
        mismatches += roc_auc(pos, neg) != mann_whitney_auc(pos.tolist(), neg.tolist())
        # 3 probes against 2 gallery identities; probe label 9 is not enrolled
        scores = np.round(rng.uniform(-1, 1, (3, 2)), 1).tolist()
        probes = [0, 1, 9] if seed % 2 else [1, 1, 0]
        got = identify_from_scores(scores, [0, 1], probes, [1, 2], [0.0, 0.5, 1.0])
        mismatches += got != brute_identify(scores, [0, 1], probes, [1, 2], [0.0, 0.5, 1.0])
    elapsed = time.perf_counter() - start
    record("metric oracles", mismatches == 0 and elapsed < 1.0,
           f"{mismatches} mismatches against brute-force enumeration on 10 seeded toy cases, {elapsed:.2f}s (< 1 s)")


def ordering_experiment():
    corpus = generate(SynthConfig(dim=64, num_identities=50, sets_per_identity=20, frames_min=4, frames_max=12,
                                  noise_sigma=0.1, degrade_fraction=0.5, corrupt_dims_fraction=0.5, seed=0))
    train_part, test_part = split(corpus, 5)[0]
    pairs = all_pairs(test_part.sets)
    auc = {"avg": verify(test_part, pairs, make_aggregator("avg"))[1]}
    for name, frame_level in (("attn", False), ("nan", True)):
        ckpt = train(train_part, TrainConfig(epochs=10, seed=0, frame_level=frame_level)).checkpoint
        auc[name] = verify(test_part, pairs, make_aggregator("attn", ckpt.params))[1]
    return auc


_ordering_cache = {}


def _ordering():
    if not _ordering_cache:
        start = time.perf_counter()
        _ordering_cache.update(ordering_experiment())
        _ordering_cache["elapsed"] = time.perf_counter() - start
    return _ordering_cache


def test_ordering_experiment():
    r = _ordering()
    gap = r["attn"] - r["avg"]
    ok = r["attn"] > r["nan"] > r["avg"] and gap >= 0.02 and r["elapsed"] < 600
    record("ordering experiment", ok,
           f"AUC attn {r['attn']:.4f}, nan {r['nan']:.4f}, avg {r['avg']:.4f}; need attn > nan > avg and "
           f"attn - avg >= 0.02 (got {gap:+.4f}); {r['elapsed']:.0f}s (< 600 s)")


def test_ordering_experiment_pinned_values():
    r = _ordering()
    drift = {k: abs(r[k] - v) for k, v in ORDERING_PINNED.items()}
    record("ordering experiment regression pins", max(drift.values()) <= PIN_TOLERANCE,
           ", ".join(f"{k} {r[k]:.4f} vs {ORDERING_PINNED[k]:.4f}" for k in ORDERING_PINNED)
           + f" (tol {PIN_TOLERANCE})")


def _pipeline(root):
    root.mkdir()
    (root / "synth.json").write_text('{"dim": 32, "num_identities": 10, "sets_per_identity": 6, "seed": 8}')
    (root / "train.json").write_text('{"epochs": 3, "batch_size": 8, "seed": 2}')
    paths = {name: str(root / name) for name in ("c.fagg", "p.fagp", "k.fagc", "t.fagg", "pairs.txt")}
    steps = [
        ["synth", "--config", str(root / "synth.json"), "--out", paths["c.fagg"]],
        ["train", "--corpus", paths["c.fagg"], "--config", str(root / "train.json"), "--out", paths["p.fagp"],
         "--ckpt-out", paths["k.fagc"]],
        ["aggregate", "--corpus", paths["c.fagg"], "--params", paths["p.fagp"], "--method", "attn",
         "--out", paths["t.fagg"]],
        ["pairs", "--corpus", paths["t.fagg"], "--out", paths["pairs.txt"]],
    ]
    for argv in steps:
        assert main(argv) == 0
    return paths


def test_reproducibility(tmp_path, capsys):
    outputs = []
    for run in ("a", "b"):
        paths = _pipeline(tmp_path / run)
        capsys.readouterr()
        assert main(["eval-verify", "--templates", paths["t.fagg"], "--pairs", paths["pairs.txt"]]) == 0
        report = capsys.readouterr().out
        files = {name: open(path, "rb").read() for name, path in paths.items()}
        outputs.append((files, report))
    (fa, ra), (fb, rb) = outputs
    differing = [name for name in fa if fa[name] != fb[name]] + (["report"] if ra != rb else [])
    ckpt = io.decode_checkpoint(fa["k.fagc"])
    record("reproducibility", not differing and ckpt.epoch == 3,
           f"corpus, checkpoint, params, templates and report byte-identical across two runs"
           if not differing else f"differing outputs: {differing}")
