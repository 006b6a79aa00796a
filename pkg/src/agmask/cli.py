"""Command-line interface.

Machine-readable JSON goes to stdout, logs to stderr.  Exit codes:
0 success, 1 usage/config error, 2 object gated absent (run/mask/prompt),
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .dataset import SynthConfig, load_manifest, synth_generate
from .errors import AgmaskError, ConfigError, NoActivationError
from .evaluation import ScoredSample, evaluate_masking, optimal_threshold, topk_accuracy
from .gradcam import attention_for
from .netpbm import load_ppm, save_pgm
from .pipeline import Pipeline
from .prompting import prompt_to_json
from .training import TrainConfig, train

log = logging.getLogger("agmask")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABSENT = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise UsageError(message)


def emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--checkpoint", help="weights file (AGMW1)")
    parser.add_argument("--gate", type=float, dest="similarity_gate",
                        help="similarity gate threshold")
    parser.add_argument("--mode", choices=("single", "multi", "box"),
                        help="prompt mode")
    parser.add_argument("--workers", type=int, help="worker pool size")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--activation-fraction", type=float,
                        help="binarization fraction of the attention peak")
    parser.add_argument("--connectivity", type=int, choices=(4, 8),
                        help="component connectivity")
    parser.add_argument("--sample-count", type=int,
                        help="points sampled around a single-region peak")
    parser.add_argument("--sample-radius", type=int,
                        help="Chebyshev sampling radius in pixels")
    parser.add_argument("--prompt-seed", type=int,
                        help="base seed for prompt sampling")
    parser.add_argument("--backend", choices=("reference", "external"),
                        help="segmenter backend")
    parser.add_argument("--tolerance", type=float, dest="color_tolerance",
                        help="region-growing color tolerance")
    parser.add_argument("--timeout", type=float, help="adapter timeout seconds")
    parser.add_argument("--adapter-cmd", help="external adapter command line")


def config_from_args(args) -> "PipelineConfig":
    overrides = {
        "pipeline": {
            "checkpoint": args.checkpoint,
            "similarity_gate": args.similarity_gate,
            "prompt_mode": args.mode,
            "workers": args.workers,
            "seed": args.seed,
        },
        "prompting": {
            "activation_fraction": args.activation_fraction,
            "connectivity": args.connectivity,
            "sample_count": args.sample_count,
            "sample_radius": args.sample_radius,
            "seed": args.prompt_seed,
        },
        "segmenter": {
            "backend": args.backend,
            "color_tolerance": args.color_tolerance,
            "timeout": args.timeout,
            "external_command": (shlex.split(args.adapter_cmd)
                                 if args.adapter_cmd else None),
        },
    }
    return load_config(args.config, overrides)


def split_entries(entries, split):
    if split == "all":
        return entries
    return [e for e in entries if e.split == split]


def cmd_synth(args) -> int:
    colors = None
    if args.colors:
        from .dataset import DEFAULT_COLORS
        names = [c.strip() for c in args.colors.split(",") if c.strip()]
        unknown = [n for n in names if n not in DEFAULT_COLORS]
        if unknown:
            raise ConfigError(f"unknown colors {unknown}; palette: "
                              f"{sorted(DEFAULT_COLORS)}")
        colors = {n: DEFAULT_COLORS[n] for n in names}
    cfg_kwargs = dict(
        size=args.size, distractors=args.distractors, noise=args.noise,
        count_per_concept=args.per_concept, seed=args.seed)
    if colors is not None:
        cfg_kwargs["colors"] = colors
    if args.shapes:
        cfg_kwargs["shapes"] = tuple(
            s.strip() for s in args.shapes.split(",") if s.strip())
    cfg = SynthConfig(**cfg_kwargs)
    entries = synth_generate(cfg, args.out)
    emit({
        "manifest": str(Path(args.out) / "manifest.jsonl"),
        "count": len(entries),
        "train": sum(1 for e in entries if e.split == "train"),
        "eval": sum(1 for e in entries if e.split == "eval"),
        "concepts": len(cfg.concept_list()),
    })
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig(
        batch_size=args.batch_size, learning_rate=args.lr, epochs=args.epochs,
        weight_decay=args.weight_decay, temperature=args.temperature,
        seed=args.seed, feature_channels=args.feature_channels,
        embed_dim=args.embed_dim, token_dim=args.token_dim)
    split = None if args.split == "all" else args.split
    _, history = train(args.manifest, args.out, cfg, split=split)
    emit({
        "checkpoint": args.out,
        "epochs": args.epochs,
        "initial_loss": round(history[0], 6),
        "final_loss": round(history[-1], 6),
    })
    return EXIT_OK


def _pipeline(args) -> Pipeline:
    return Pipeline(config_from_args(args))


def cmd_score(args) -> int:
    pipeline = _pipeline(args)
    image = load_ppm(args.image)
    score = pipeline.encoders.similarity_score(image, args.caption).value
    emit({"similarity": round(score, 6),
          "present": score >= pipeline.config.similarity_gate,
          "gate": pipeline.config.similarity_gate})
    return EXIT_OK


def cmd_attend(args) -> int:
    pipeline = _pipeline(args)
    image = load_ppm(args.image)
    attention = attention_for(image, args.caption, pipeline.encoders)
    save_pgm(attention.to_u8(), args.out)
    emit({"attention": args.out,
          "peak": [attention.peak[1], attention.peak[0]],
          "empty": attention.is_empty})
    return EXIT_OK


def cmd_prompt(args) -> int:
    pipeline = _pipeline(args)
    image = load_ppm(args.image)
    attention = attention_for(image, args.caption, pipeline.encoders)
    try:
        prompts = pipeline.prompts_for(attention, args.mode or
                                        pipeline.config.prompt_mode, args.id)
    except NoActivationError:
        log.error("attention map empty: no prompt can be derived")
        return EXIT_ABSENT
    print(prompt_to_json(prompts))
    return EXIT_OK


def cmd_mask(args) -> int:
    pipeline = _pipeline(args)
    image = load_ppm(args.image)
    result = pipeline.run(image, args.caption, sample_id=args.id,
                          mask_out=args.out)
    emit({"id": result.sample_id, "similarity": round(result.similarity, 6),
          "present": result.present, "mask": result.mask_path,
          "warning": result.warning})
    return EXIT_OK if result.present else EXIT_ABSENT


def cmd_run(args) -> int:
    pipeline = _pipeline(args)
    image = load_ppm(args.image)
    result = pipeline.run(image, args.caption, sample_id=args.id,
                          mask_out=args.out_mask)
    emit(result.to_dict())
    return EXIT_OK if result.present else EXIT_ABSENT


def cmd_eval_iou(args) -> int:
    config = config_from_args(args)
    entries = split_entries(load_manifest(args.manifest), args.split)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    report = evaluate_masking(entries, config, modes=modes)
    emit(report)
    return EXIT_OK


def _load_samples_jsonl(path) -> list[ScoredSample]:
    samples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            samples.append(ScoredSample(sample_id=str(doc["id"]),
                                        score=float(doc["score"]),
                                        correct=bool(doc["correct"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad sample line: {exc}") from exc
    return samples


def _scored_samples(pipeline: Pipeline, entries) -> list[ScoredSample]:
    captions = sorted({e.caption for e in entries})
    index = {c: i for i, c in enumerate(captions)}
    samples = []
    for entry in sorted(entries, key=lambda e: e.id):
        row = pipeline.caption_scores(entry, captions)
        best = int(np.argmax(row))
        samples.append(ScoredSample(sample_id=entry.id, score=float(row[best]),
                                    correct=best == index[entry.caption]))
    return samples


def cmd_eval_threshold(args) -> int:
    if args.samples:
        samples = _load_samples_jsonl(args.samples)
    elif args.manifest:
        pipeline = _pipeline(args)
        entries = split_entries(load_manifest(args.manifest), args.split)
        samples = _scored_samples(pipeline, entries)
    else:
        raise UsageError("eval-threshold needs --samples or --manifest")
    report = optimal_threshold(samples)
    emit({"threshold": round(report.threshold, 6),
          "f1": round(report.f1, 6),
          "table": [[round(v, 6) for v in row] for row in report.table]})
    return EXIT_OK


def cmd_eval_accuracy(args) -> int:
    pipeline = _pipeline(args)
    entries = split_entries(load_manifest(args.manifest), args.split)
    if not entries:
        raise ConfigError(f"no entries in split {args.split!r}")
    captions = sorted({e.caption for e in entries})
    index = {c: i for i, c in enumerate(captions)}
    rows, labels = [], []
    for entry in sorted(entries, key=lambda e: e.id):
        rows.append(pipeline.caption_scores(entry, captions))
        labels.append(index[entry.caption])
    matrix = np.vstack(rows)
    emit({
        "top1": round(topk_accuracy(matrix, labels, 1), 6),
        "top5": round(topk_accuracy(matrix, labels, min(5, len(captions))), 6),
        "captions": len(captions),
        "samples": len(entries),
    })
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="agmask",
                     description="Attention-guided object masking pipeline")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-concept", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distractors", type=int, default=2)
    p.add_argument("--noise", type=int, default=8)
    p.add_argument("--colors", help="comma-separated palette color names")
    p.add_argument("--shapes", help="comma-separated shapes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="contrastive fine-tuning")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-channels", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--token-dim", type=int, default=16)
    p.add_argument("--split", default="train", choices=("train", "eval", "all"))
    p.set_defaults(func=cmd_train)

    for name, func, needs_image in (
            ("score", cmd_score, True), ("attend", cmd_attend, True),
            ("prompt", cmd_prompt, True), ("mask", cmd_mask, True),
            ("run", cmd_run, True)):
        p = sub.add_parser(name, help=f"{name} one image/caption pair")
        add_config_flags(p)
        p.add_argument("--image", required=needs_image)
        p.add_argument("--caption", required=True)
        p.add_argument("--id", default="sample")
        if name == "attend":
            p.add_argument("--out", required=True, help="attention PGM path")
        if name == "mask":
            p.add_argument("--out", required=True, help="mask PGM path")
        if name == "run":
            p.add_argument("--out-mask", help="optional mask PGM path")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-iou", help="mask-quality report over a manifest")
    add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--modes", default="single,multi,box")
    p.add_argument("--split", default="eval", choices=("train", "eval", "all"))
    p.set_defaults(func=cmd_eval_iou)

    p = sub.add_parser("eval-threshold", help="F1-optimal threshold sweep")
    add_config_flags(p)
    p.add_argument("--samples", help="JSONL of {id, score, correct}")
    p.add_argument("--manifest")
    p.add_argument("--split", default="eval", choices=("train", "eval", "all"))
    p.set_defaults(func=cmd_eval_threshold)

    p = sub.add_parser("eval-accuracy", help="top-1/top-5 caption accuracy")
    add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="eval", choices=("train", "eval", "all"))
    p.set_defaults(func=cmd_eval_accuracy)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AgmaskError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
