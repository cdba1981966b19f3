"""Command-line front end: ``fagg <subcommand> ...``.

Metrics and loss history go to stdout, diagnostics to stderr. Config files are
JSON objects whose keys are the fields of ``SynthConfig`` / ``TrainConfig``.
Exit status is 0 on success, the format error code (10-14) for malformed input
files, 1 for other failures and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from fagg import io
from fagg.attention import AttentionParams, Mode
from fagg.core import FeatureSet, l2_normalize
from fagg.evaluation import EvalReport, all_pairs, identify, make_aggregator, sample_pairs, verify
from fagg.grad import MarginHead, finite_diff_check
from fagg.synth import LabeledCorpus, SynthConfig, generate, make_rng
from fagg.trainer import Checkpoint, TrainConfig, finetune, train

GRADCHECK_TOLERANCE = 1e-4


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(_load_json(path)) if path else TrainConfig()


def _print_history(history):
    for epoch, batch, loss in history:
        print(io.format_history_line(epoch, batch, loss))


def _template_identity(s: FeatureSet) -> np.ndarray:
    if s.num_frames != 1:
        raise ValueError(f"{s.set_id}: a template file holds one frame per set, found {s.num_frames}")
    return l2_normalize(s.frames[0])


# -- subcommands ------------------------------------------------------------


def cmd_synth(args):
    corpus = generate(SynthConfig.from_dict(_load_json(args.config)))
    io.write_corpus(args.out, corpus)
    frames = sum(s.num_frames for s in corpus.sets)
    print(f"identities\t{len(corpus.identities)}")
    print(f"sets\t{len(corpus.sets)}")
    print(f"frames\t{frames}")


def cmd_pairs(args):
    corpus = io.read_corpus(args.corpus)
    if args.positives is None:
        pairs = all_pairs(corpus.sets)
    else:
        pairs = sample_pairs(corpus.sets, args.positives, args.negatives, make_rng(args.seed))
    io.write_pairs(args.out, pairs)
    print(f"pairs\t{len(pairs)}")


def cmd_train(args):
    corpus = io.read_corpus(args.corpus)
    cfg = _train_config(args.config)
    resume = io.read_checkpoint(args.resume) if args.resume else None
    result = train(corpus, cfg, resume)
    _print_history(result.history)
    io.write_params(args.out, result.checkpoint.params, result.checkpoint.head)
    if args.ckpt_out:
        io.write_checkpoint(args.ckpt_out, result.checkpoint)


def cmd_finetune(args):
    corpus = io.read_corpus(args.corpus)
    cfg = _train_config(args.config)
    params, head = io.read_params(args.params, cfg.margin, cfg.scale)
    result = finetune(Checkpoint(params, head), corpus, cfg)
    _print_history(result.history)
    io.write_params(args.out, result.checkpoint.params, result.checkpoint.head)
    if args.ckpt_out:
        io.write_checkpoint(args.ckpt_out, result.checkpoint)


def _nan_kernel(params: AttentionParams) -> np.ndarray:
    """A frame-level kernel is stored as a linear block whose rows all equal q."""
    if params.mode is not Mode.LINEAR or not np.all(params.q1 == params.q1[0]):
        raise ValueError("--method nan needs a linear-mode parameter file with identical kernel rows")
    return params.q1[0]


def cmd_aggregate(args):
    corpus = io.read_corpus(args.corpus)
    params = None
    if args.method in ("nan", "attn"):
        if not args.params:
            raise ValueError(f"--method {args.method} needs --params")
        params, _ = io.read_params(args.params)
        if params.dim != corpus.dim:
            raise ValueError(f"parameter dim {params.dim} does not match corpus dim {corpus.dim}")
    if args.method == "nan":
        agg = make_aggregator("nan", q=_nan_kernel(params))
    else:
        agg = make_aggregator(args.method, params)
    templates = [FeatureSet(agg(s)[None, :], s.label, s.set_id) for s in corpus.sets]
    io.write_corpus(args.out, LabeledCorpus(templates, prng_tag=corpus.prng_tag))
    print(f"templates\t{len(templates)}")


def _emit(report: EvalReport, table: bool):
    report.check()
    sys.stdout.write(report.to_table() if table else report.to_lines())


def cmd_eval_verify(args):
    templates = io.read_corpus(args.templates)
    pairs = io.read_pairs(args.pairs)
    tar, auc = verify(templates, pairs, _template_identity, args.far, args.metric)
    _emit(EvalReport(tar_at_far=tar, auc=auc), args.table)


def cmd_eval_identify(args):
    gallery = io.read_corpus(args.gallery)
    probes = io.read_corpus(args.probes)
    if gallery.dim != probes.dim:
        raise ValueError(f"gallery dim {gallery.dim} does not match probe dim {probes.dim}")
    rank_n, tpir = identify(gallery.sets, probes.sets, _template_identity, args.rank, args.fpir, args.metric)
    _emit(EvalReport(rank_n=rank_n, tpir_at_fpir=tpir), args.table)


def gradcheck_instance(dim: int, frames: int, classes: int, seed: int, mode: Mode = Mode.CASCADED):
    """One seeded random problem: a unit-norm frame set, random parameters and head, random label."""
    rng = make_rng(seed)
    x = rng.standard_normal((frames, dim))
    s = FeatureSet(x / np.linalg.norm(x, axis=1, keepdims=True), int(rng.integers(classes)))
    if mode is Mode.LINEAR:
        params = AttentionParams.linear(rng.standard_normal((dim, dim)))
    else:
        params = AttentionParams(rng.standard_normal((dim, dim)), rng.standard_normal(dim) * 0.5,
                                 rng.standard_normal((dim, dim)), rng.standard_normal(dim) * 0.5, mode)
    head = MarginHead.random(classes, dim, rng, margin=0.5, scale=8.0)
    return s, params, head


def cmd_gradcheck(args):
    mode = Mode(args.mode)
    s, params, head = gradcheck_instance(args.dim, args.frames, args.classes, args.seed, mode)
    err = finite_diff_check(s, params, head, s.label)
    print(f"max_relative_error\t{err:.3e}")
    if not err < GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fagg", description="Set-embedding aggregation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pairs", help="write a verification pairs file for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--positives", type=int, help="sample this many genuine pairs instead of taking all pairs")
    p.add_argument("--negatives", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", help="train aggregation parameters and margin head")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--ckpt-out", help="also write a resumable checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training on another corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt-out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("aggregate", help="aggregate every set into a one-frame template")
    p.add_argument("--corpus", required=True)
    p.add_argument("--params")
    p.add_argument("--method", choices=("avg", "max", "nan", "attn"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("eval-verify", help="TAR@FAR and AUC over a pairs file")
    p.add_argument("--templates", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--far", type=_floats, default=[0.001, 0.01, 0.1])
    p.add_argument("--metric", choices=("cosine", "l2"), default="cosine")
    p.add_argument("--table", action="store_true", help="aligned table instead of metric<TAB>value lines")
    p.set_defaults(func=cmd_eval_verify)

    p = sub.add_parser("eval-identify", help="rank-N and TPIR@FPIR")
    p.add_argument("--gallery", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--rank", type=_ints, default=[1, 5, 10])
    p.add_argument("--fpir", type=_floats, default=[0.01, 0.1])
    p.add_argument("--metric", choices=("cosine", "l2"), default="cosine")
    p.add_argument("--table", action="store_true")
    p.set_defaults(func=cmd_eval_identify)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.CASCADED.value)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except io.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
