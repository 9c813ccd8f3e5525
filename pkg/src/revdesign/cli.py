"""Command-line pipeline: gen-data, pretrain, train, eval, compare, probe.

Exit codes: 0 success, 2 config error, 3 data integrity error, 4 training
divergence, 5 evaluation malformed-rate breach.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, dataset as ds, evalkit, model as mdl, training
from .errors import (
    ConfigError,
    DivergenceError,
    IntegrityError,
    ManifestError,
    RevDesignError,
)
from .prompting import build_vocab

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_MALFORMED = 5


def manifest_content_hash(directory: str) -> str:
    """SHA-256 over manifest.jsonl plus every PNG, in sorted path order."""
    h = hashlib.sha256()
    paths = [os.path.join(directory, "manifest.jsonl")]
    img_dir = os.path.join(directory, "images")
    if os.path.isdir(img_dir):
        paths.extend(os.path.join(img_dir, n) for n in sorted(os.listdir(img_dir)))
    for path in paths:
        with open(path, "rb") as fh:
            h.update(os.path.basename(path).encode())
            h.update(fh.read())
    return h.hexdigest()


def _parse_weights(text: str) -> tuple[float, float, float]:
    try:
        w = tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --op-weights {text!r}: {exc}") from exc
    if len(w) != 3 or abs(sum(w) - 1.0) > 1e-9 or min(w) < 0:
        raise ConfigError("--op-weights needs three non-negative values summing to 1")
    return w


def cmd_gen_data(args) -> int:
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    config = ds.GenConfig(op_count_weights=_parse_weights(args.op_weights))
    manifest = ds.build_manifest(args.seed, args.n, config)
    ds.write_manifest(manifest, out)
    sizes = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    hist = {k: 0 for k in (1, 2, 3)}
    for rec in manifest.records:
        hist[len(rec.spec.ops)] += 1
    content_hash = manifest_content_hash(out)
    summary = {
        "n": args.n,
        "seed": args.seed,
        "split_sizes": sizes,
        "op_count_histogram": hist,
        "content_hash": content_hash,
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.n} records to {out}")
    print(f"split sizes: {sizes}")
    print(f"op-count histogram: {hist}")
    print(f"content hash: {content_hash}")
    if args.verify:
        ds.read_manifest(out, verify=True)
        print("verify: OK")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    if not os.path.isfile(os.path.join(args.data, "manifest.jsonl")):
        raise ManifestError(f"missing manifest under {args.data}")
    ds.read_manifest(args.data)
    vocab = build_vocab()
    cfg = mdl.ModelConfig(vocab_size=len(vocab), seed=args.seed)
    params = mdl.init_params(cfg)
    params, vis_metrics = training.pretrain_vision(
        params, cfg, args.seed, n_images=args.vision_images
    )
    print(f"vision pretraining: recon_mse={vis_metrics['recon_mse']:.5f} "
          f"steps={vis_metrics['steps']}")
    params, lm_metrics = training.pretrain_lm(
        params, cfg, vocab, args.seed, n_pairs=args.lm_pairs
    )
    print(f"lm pretraining: holdout_ce={lm_metrics['holdout_ce']:.4f} "
          f"opname_rate={lm_metrics['opname_rate']:.2f} steps={lm_metrics['steps']}")
    mdl.save_checkpoint(
        params, cfg, vocab, args.out, step=0,
        val_metrics={},
        extra={"pretrain_vision": vis_metrics, "pretrain_lm": lm_metrics,
               "seed": args.seed},
    )
    print(f"wrote pretrained checkpoint to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = ds.read_manifest(args.data)
    exp = training.ExperimentConfig(
        experiment=args.exp,
        epochs=args.epochs,
        aux_weight=args.aux_weight,
        aux_detached=args.aux_detached,
        unfrozen=args.unfrozen,
        seed=args.seed,
        val_subset=args.val_subset,
    )
    result = training.train(exp, manifest, args.out, init=args.init)
    print(f"experiment {args.exp}: best val accuracy={result.best_accuracy:.4f} "
          f"mse={result.best_mse:.4f} at step {result.best_step} "
          f"(epoch {result.best_epoch})")
    print(f"run directory: {result.run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, meta = mdl.load_checkpoint(args.ckpt)
    manifest = ds.read_manifest(args.data)
    records = manifest.split(args.split)
    if not records:
        raise ConfigError(f"split {args.split!r} is empty")
    report, rows = evalkit.evaluate(
        params, meta["config"], meta["vocab"], manifest, records,
        eval_seed=args.seed, max_new=args.max_new,
        break_style=bool(meta["extra"].get("break_style", False)),
    )
    report.metadata.update({
        "checkpoint": os.path.basename(args.ckpt),
        "split": args.split,
        "experiment": meta["extra"].get("experiment", ""),
    })
    table = evalkit.render_report(report, rows, args.out,
                                  label=meta["extra"].get("experiment", "run"))
    print(table, end="")
    if report.malformed_rate > 0.5:
        print(f"malformed rate {report.malformed_rate:.2f} exceeds 0.5", file=sys.stderr)
        return EXIT_MALFORMED
    return EXIT_OK


def cmd_compare(args) -> int:
    runs = []
    for run in args.runs:
        path = run if run.endswith(".json") else os.path.join(run, "report.json")
        if not os.path.isfile(path):
            raise ManifestError(f"missing report: {path}")
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        label = rep.get("metadata", {}).get("experiment") or os.path.basename(
            os.path.normpath(run if not run.endswith(".json") else os.path.dirname(run))
        )
        runs.append((label, rep))
    table = evalkit.render_compare(runs)
    print(table, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.ckpt:
        params, meta = mdl.load_checkpoint(args.ckpt)
        cfg, vocab = meta["config"], meta["vocab"]
    else:
        vocab = build_vocab()
        cfg = mdl.ModelConfig(vocab_size=len(vocab), seed=args.seed)
        params = mdl.init_params(cfg)
    batch = mdl.probe_batch(vocab, cfg)
    logits, _ = mdl.forward(params, cfg, batch)
    blob = logits.astype("<f4").tobytes().hex()
    header = f"probe logits shape={list(logits.shape)} dtype=<f4\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(header + blob + "\n")
        print(f"wrote probe dump to {args.out}")
    else:
        print(header + blob)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revdesign",
        description="Reverse-designing lab: infer image edits from (source, edited, command) triplets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a triplet corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=22000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op-weights", default="0.5,0.3,0.2",
                   help="comma-separated op-count weights for 1/2/3 ops")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain vision encoder and LM")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lm-pairs", type=int, default=50000)
    p.add_argument("--vision-images", type=int, default=5000)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run one fine-tuning experiment")
    p.add_argument("--exp", required=True, choices=training.EXPERIMENTS)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="pretrained checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--unfrozen", action="store_true",
                   help="train vision and LM too (learnability fallback)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--aux-weight", type=float, default=1.0)
    p.add_argument("--aux-detached", type=lambda s: s.lower() in ("1", "true", "yes"),
                   default=True, metavar="BOOL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-subset", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="Table-1-shaped comparison across runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("probe", help="dump logits for the fixed builtin batch")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, IntegrityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except RevDesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
