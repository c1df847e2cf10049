"""Command-line entry point.

Subcommands cover the full pipeline: prepare-data, train-gan, synthesize,
train-recognizer, evaluate, ablate, sample-grid.  Option precedence is
defaults < --config file < explicit flags; every run echoes the resolved
configuration into its output directory.  Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import ablation, metrics, reporting, training
from .checkpoint import CheckpointMismatch
from .config import (
    ConfigError,
    GANTrainConfig,
    RecTrainConfig,
    SynthesisConfig,
    build_config,
    load_config_file,
    write_resolved,
)
from .corpus import CorpusError, HANDWRITTEN, RENDERED, Vocabulary, read_corpus_file
from .data import EmptyDataset, load_training_set
from .fixtures import load_sample_corpus
from .manifest import ManifestError, read_manifest
from .metrics import EmptyList, EmptyReference
from .prepare import prepare_inkml_dataset, prepare_rendered_dataset, prepare_synthetic_handwritten
from .rendering import RenderError, RenderParams, make_backend
from .strokes import StrokeError

DOMAIN_ERRORS = (
    ConfigError,
    CorpusError,
    ManifestError,
    CheckpointMismatch,
    RenderError,
    StrokeError,
    EmptyDataset,
    EmptyList,
    EmptyReference,
    training.NonFiniteLoss,
    training.FilterViolation,
    FileNotFoundError,
    ValueError,
)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--config", type=Path, help="YAML config file (defaults < file < flags)")
    parser.add_argument(
        "--renderer",
        default=None,
        help="'stub' or 'http:<url>'; defaults to $RENDER_URL when set, else stub",
    )
    parser.add_argument("--workers", type=int, default=1, help="parallel workers for rendering")


def _backend(args):
    spec = args.renderer
    if spec is None:
        env = os.environ.get("RENDER_URL")
        spec = f"http:{env}" if env else "stub"
    return make_backend(spec)


def _file_values(args) -> dict:
    return load_config_file(args.config) if args.config else {}


def _echo_args(args, out_dir, skip=("config",)) -> None:
    values = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func", *skip) and not k.startswith("_")}
    write_resolved_dict(values, out_dir)


def write_resolved_dict(values: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(yaml.safe_dump(values, sort_keys=True), encoding="utf-8")


def _load_corpus(arg: str, limit: int | None = None, domain: str = RENDERED):
    if arg == "sample":
        records = load_sample_corpus(limit)
        if domain != RENDERED:
            records = [dataclasses.replace(r, domain=domain) for r in records]
        return records
    records, _ = read_corpus_file(arg, domain=domain)
    return records[:limit] if limit else records


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    backend = _backend(args)
    out = Path(args.out)
    if args.inkml:
        stats = prepare_inkml_dataset(args.inkml, out, target_height=args.inkml_height)
    else:
        records = _load_corpus(args.corpus, args.limit, domain=args.domain)
        fixed = RenderParams(font_size=args.font_size) if args.fixed_render else None
        if args.domain == HANDWRITTEN or args.synthetic_handwriting:
            stats = prepare_synthetic_handwritten(
                records, out, backend, seed=args.seed, font_size=args.font_size
            )
        else:
            stats = prepare_rendered_dataset(
                records, out, backend, seed=args.seed,
                sample_params=not args.fixed_render, fixed_params=fixed, workers=args.workers,
            )
    _echo_args(args, out)
    print(f"wrote {stats.written} records to {out} ({stats.render_failures} excluded)")
    return 0


def cmd_train_gan(args) -> int:
    overrides = {
        k: v
        for k, v in {
            "lam": args.lam,
            "max_iterations": args.max_iterations,
            "batch_size": args.batch_size,
            "input_height": args.input_height,
            "gan_preset": args.gan_preset,
            "task_preset": args.task_preset,
            "seed": args.seed,
            "bidirectional": args.bidirectional,
            "checkpoint_iterations": args.checkpoint_at,
        }.items()
        if v is not None
    }
    cfg = build_config(GANTrainConfig, _file_values(args), overrides)
    result = training.train_gan(cfg, args.rendered, args.handwritten, args.out)
    reporting.save_loss_curves(result["metrics"], Path(args.out) / "losses.png")
    print(f"final checkpoint: {result['final']}")
    return 0


def cmd_synthesize(args) -> int:
    overrides = {k: v for k, v in {"seed": args.seed, "max_pixel_area": args.max_area,
                                   "sample_render_params": False if args.fixed_render else None}.items()
                 if v is not None}
    cfg = build_config(SynthesisConfig, _file_values(args), overrides)
    records = _load_corpus(args.corpus, args.limit)
    stats = training.synthesize_dataset(args.checkpoint, records, cfg, _backend(args), args.out)
    _echo_args(args, args.out)
    print(
        f"synthesized {stats.accepted} images to {args.out} "
        f"(area-skipped {stats.skipped_area}, render failures {stats.failed_render})"
    )
    return 0


def cmd_train_recognizer(args) -> int:
    overrides = {
        k: v
        for k, v in {
            "epochs": args.epochs,
            "steps_per_epoch": args.steps_per_epoch,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "model_preset": args.preset,
            "normalize_mode": args.normalize_mode,
            "seed": args.seed,
            "eval_beam_size": args.beam_size,
        }.items()
        if v is not None
    }
    cfg = build_config(RecTrainConfig, _file_values(args), overrides)
    result = training.train_recognizer(args.train, args.val, cfg, args.out)
    print(f"best ExpRate {result['best_exprate']:.2f}% -> {result['best_checkpoint']}")
    return 0


def _truth_records(path: str):
    p = Path(path)
    dataset_dir = p.parent if p.is_file() else p
    records, vocab = read_manifest(dataset_dir)
    return records, vocab


def cmd_evaluate(args) -> int:
    records, vocab = _truth_records(args.truth)
    truth_by_id = {r.id: [t for t in r.tokens if t not in Vocabulary.SPECIALS] for r in records}

    predictions: dict[str, list[str]] = {}
    ppl = None
    if args.pred:
        with open(args.pred, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    predictions[row["id"]] = list(row["tokens"])
    elif args.model:
        model, model_vocab, extra = training.load_recognizer(args.model)
        rule = training.normalization_height_rule(extra.get("normalize_mode", "height-128"))
        dataset = load_training_set(Path(args.truth), rule, max_width=4096, max_tokens=10**6, vocab=model_vocab)
        pred_path = Path(args.out) / "predictions.jsonl"
        pred_path.parent.mkdir(parents=True, exist_ok=True)
        with pred_path.open("w", encoding="utf-8") as fh:
            for rec, img in zip(dataset.records, dataset.images):
                result = model.beam_search(torch.from_numpy(img), beam_size=args.beam_size)
                tokens = model_vocab.decode(result.output_ids)
                predictions[rec.id] = tokens
                fh.write(json.dumps({"id": rec.id, "tokens": tokens, "log_prob": result.log_prob}) + "\n")
        ppl = metrics.perplexity(model, dataset)
    else:
        raise ConfigError("evaluate needs --pred or --model")

    rows, pairs = [], []
    for rec_id, ref in sorted(truth_by_id.items()):
        if rec_id not in predictions:
            continue
        hyp = predictions[rec_id]
        pairs.append((ref, hyp))
        rows.append({"id": rec_id, "wer": metrics.wer(ref, hyp), "exact": int(ref == hyp), "ref_len": len(ref)})
    aggregate = metrics.evaluate_pairs(pairs, ppl=ppl)
    files = reporting.write_eval_report(rows, aggregate, args.out)
    _echo_args(args, args.out)
    print(f"WER {aggregate.wer:.4f}  ExpRate {aggregate.exprate:.2f}%  -> {files['aggregate']}")
    return 0


def cmd_ablate(args) -> int:
    base_file = _file_values(args)
    variants = []
    for lam in args.lambdas:
        cfg = build_config(
            GANTrainConfig,
            base_file,
            {
                "lam": lam,
                "seed": args.seed,
                "max_iterations": max(args.iterations),
                "gan_preset": args.gan_preset,
                "task_preset": args.task_preset,
                "batch_size": args.batch_size,
                "input_height": args.input_height,
            },
        )
        variants.append((f"lambda={lam:g}", cfg))
    records = _load_corpus(args.corpus, args.limit)
    result = ablation.ablation_run(
        variants,
        args.iterations,
        args.rendered,
        args.handwritten,
        args.eval_dir,
        records,
        _backend(args),
        args.out,
        probe_cfg=RecTrainConfig(
            model_preset="tiny",
            epochs=args.probe_epochs,
            steps_per_epoch=args.probe_steps,
            normalize_mode="height-128",
            augment=False,
            seed=args.seed,
        ),
        synthesis_cfg=SynthesisConfig(input_height=args.input_height or 128, seed=args.seed),
    )
    print(f"ablation table -> {result['files']['csv']}")
    return 0


def cmd_sample_grid(args) -> int:
    if args.formulas == "sample":
        formulas = [r.source_latex for r in load_sample_corpus(args.n)]
    else:
        formulas = [ln.strip() for ln in Path(args.formulas).read_text(encoding="utf-8").splitlines() if ln.strip()]
        formulas = formulas[: args.n] if args.n else formulas
    grid = reporting.emit_sample_grid(args.checkpoint, formulas, args.out, _backend(args), seed=args.seed)
    print(f"wrote {grid.shape[1]}x{grid.shape[0]} grid to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mathscribe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="render a corpus into a dataset directory")
    _common(p)
    p.add_argument("--corpus", default="sample", help="corpus file (one formula per line) or 'sample'")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--domain", choices=[RENDERED, HANDWRITTEN], default=RENDERED)
    p.add_argument("--synthetic-handwriting", action="store_true", help="warp renders into a handwritten-style domain")
    p.add_argument("--inkml", type=Path, help="directory of InkML trace files (handwritten domain)")
    p.add_argument("--inkml-height", type=int, default=128)
    p.add_argument("--limit", type=int)
    p.add_argument("--fixed-render", action="store_true", help="disable render-parameter sampling")
    p.add_argument("--font-size", type=int, default=32)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train-gan", help="train the domain-translation GAN")
    _common(p)
    p.add_argument("--rendered", required=True, type=Path)
    p.add_argument("--handwritten", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-height", type=int)
    p.add_argument("--gan-preset", choices=["default", "tiny"])
    p.add_argument("--task-preset", choices=["small", "tiny", "large"])
    p.add_argument("--bidirectional", type=lambda s: s.lower() in ("1", "true", "yes"))
    p.add_argument("--checkpoint-at", type=lambda s: [int(x) for x in s.split(",") if x])
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("synthesize", help="bulk-generate handwritten-style images from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--corpus", default="sample")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--limit", type=int)
    p.add_argument("--max-area", type=int)
    p.add_argument("--fixed-render", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train-recognizer", help="train the formula recognizer")
    _common(p)
    p.add_argument("--train", action="append", required=True, type=Path, help="repeatable dataset dir")
    p.add_argument("--val", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--preset", choices=["small", "tiny", "large"])
    p.add_argument("--normalize-mode", choices=["height-128", "symbol-height"])
    p.add_argument("--beam-size", type=int)
    p.set_defaults(func=cmd_train_recognizer)

    p = sub.add_parser("evaluate", help="score predictions against a truth manifest")
    _common(p)
    p.add_argument("--pred", type=Path, help="predictions.jsonl ({id, tokens, log_prob} per line)")
    p.add_argument("--model", type=Path, help="recognizer checkpoint to decode with")
    p.add_argument("--truth", required=True, type=Path, help="dataset dir or its manifest.jsonl")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--beam-size", type=int, default=10)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="variant x iteration perplexity table")
    _common(p)
    p.add_argument("--rendered", required=True, type=Path)
    p.add_argument("--handwritten", required=True, type=Path)
    p.add_argument("--eval-dir", required=True, type=Path)
    p.add_argument("--corpus", default="sample")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--lambdas", type=lambda s: [float(x) for x in s.split(",")], default=[0.0, 1.0])
    p.add_argument("--iterations", type=lambda s: [int(x) for x in s.split(",")], default=[50, 100])
    p.add_argument("--gan-preset", choices=["default", "tiny"], default="tiny")
    p.add_argument("--task-preset", choices=["small", "tiny", "large"], default="tiny")
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--input-height", type=int, default=32)
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--probe-epochs", type=int, default=2)
    p.add_argument("--probe-steps", type=int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sample-grid", help="input vs synthesized side-by-side grid image")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--formulas", default="sample", help="formula file or 'sample'")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_sample_grid)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(args.seed)
    np.random.seed(args.seed % 2**32)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
