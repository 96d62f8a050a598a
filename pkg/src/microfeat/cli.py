"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 divergence abort.
Results go to stdout; logs go to stderr. Every subcommand that draws random
numbers takes --seed and is bit-reproducible with --threads 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys

from microfeat import corpus as corpus_mod
from microfeat import evaluation, training
from microfeat.checkpoint import load_checkpoint
from microfeat.corpus import CorpusError, SyntheticCorpusSpec
from microfeat.patching import PatchingError
from microfeat.training import DivergenceError, TrainConfig


def build_parser():
    p = argparse.ArgumentParser(prog="microfeat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a deterministic synthetic corpus")
    g.add_argument("--classes", type=int, default=8, help="number of species classes")
    g.add_argument("--per-class", type=int, default=64, help="samples per class")
    g.add_argument("--seed", type=int, default=0, help="generation seed")
    g.add_argument("--image-size", type=int, default=32, help="square image side in pixels")
    g.add_argument("--motif-size", type=int, default=6, help="motif side in pixels")
    g.add_argument("--patch-side", type=int, default=8, help="patch side the corpus targets")
    g.add_argument("--out", required=True, help="output record file (JSON lines)")

    s = sub.add_parser("stats", help="per-level taxon counts of a record file")
    s.add_argument("--corpus", required=True, help="record file to summarize")

    t = sub.add_parser("pretrain", help="run self-supervised pretraining")
    t.add_argument("--corpus", required=True, help="record file with training data")
    t.add_argument("--out", required=True, help="directory for checkpoints and metrics")
    t.add_argument("--config", help="JSON training config file (flags override it)")
    t.add_argument("--steps", type=int, help="override: total optimization steps")
    t.add_argument("--seed", type=int, help="override: training seed")
    t.add_argument("--batch-size", type=int, help="override: batch size")
    t.add_argument("--lr", type=float, help="override: base learning rate")
    t.add_argument("--threads", type=int, help="override: worker threads (1 = deterministic)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--log-every", type=int, default=100, help="progress print interval (0 = quiet)")

    c = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    c.add_argument("--seed", type=int, default=0, help="instance seed")
    c.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    c.add_argument("--tol", type=float, default=1e-4, help="pass threshold on max relative error")

    pr = sub.add_parser("probe", help="linear probe on a frozen checkpoint")
    pr.add_argument("--ckpt", required=True, help="checkpoint file")
    pr.add_argument("--corpus", required=True, help="labeled record file")
    pr.add_argument("--level", default="species", help="taxonomy level to classify")
    pr.add_argument("--seed", type=int, default=0, help="split and probe-init seed")
    pr.add_argument("--steps", type=int, default=200, help="probe optimization steps")
    pr.add_argument("--lr", type=float, default=1e-3, help="probe learning rate")
    pr.add_argument("--out", help="optional results file (JSON)")

    z = sub.add_parser("zeroshot", help="zero-shot description matching")
    z.add_argument("--ckpt", required=True, help="checkpoint file")
    z.add_argument("--corpus", required=True, help="labeled record file")
    z.add_argument("--level", default="species", help="taxonomy level to classify")
    z.add_argument("--out", help="optional results file (JSON)")

    i = sub.add_parser("inspect", help="print a checkpoint's header")
    i.add_argument("--ckpt", required=True, help="checkpoint file")
    return p


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _emit_result(result: evaluation.ProbeResult, out_path=None):
    payload = dataclasses.asdict(result)
    payload["config_hash"] = _config_hash(payload["config"])
    text = json.dumps(payload, sort_keys=True, indent=2)
    print(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def cmd_gen_corpus(args):
    spec = SyntheticCorpusSpec(
        num_classes=args.classes,
        samples_per_class=args.per_class,
        image_size=(args.image_size, args.image_size),
        motif_size=args.motif_size,
        patch_side=args.patch_side,
        seed=args.seed,
    )
    records = corpus_mod.generate_synthetic(spec)
    corpus_mod.write_records(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_stats(args):
    records = corpus_mod.load_records(args.corpus)
    stats = corpus_mod.corpus_stats(records)
    for level in corpus_mod.LEVELS:
        for name in sorted(stats[level]):
            print(f"{level}\t{name}\t{stats[level][name]}")
    return 0


def cmd_pretrain(args):
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {"steps": args.steps, "seed": args.seed, "batch_size": args.batch_size,
                 "base_lr": args.lr, "threads": args.threads}
    cfg_dict = cfg.to_dict()
    cfg_dict.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig.from_dict(cfg_dict)
    records = corpus_mod.load_records(args.corpus)
    _, metrics, _ = training.train(cfg, records, out_dir=args.out,
                                   resume_from=args.resume, log_every=args.log_every)
    final = metrics[-1] if metrics else {}
    print(json.dumps({"final_step": final.get("step"), "final_total": final.get("total"),
                      "out": args.out, "config_hash": _config_hash(cfg.to_dict())},
                     sort_keys=True))
    return 0


def cmd_gradcheck(args):
    errors = training.gradcheck_losses(seed=args.seed, eps=args.eps)
    worst = max(errors.values())
    for name, err in sorted(errors.items()):
        print(f"{name}\tmax_rel_err\t{err:.3e}")
    print(f"max_rel_err\t{worst:.3e}\ttol\t{args.tol:.1e}")
    return 0 if worst < args.tol else 1


def cmd_probe(args):
    model, _, _, _ = training.load_model(args.ckpt)
    records = corpus_mod.load_records(args.corpus)
    result = evaluation.linear_probe(model, records, level=args.level,
                                     seed=args.seed, steps=args.steps, lr=args.lr)
    _emit_result(result, args.out)
    return 0


def cmd_zeroshot(args):
    model, tokenizer, _, _ = training.load_model(args.ckpt)
    records = corpus_mod.load_records(args.corpus)
    class_texts = evaluation.class_descriptions_from_corpus(records, level=args.level)
    result = evaluation.zero_shot(model, tokenizer, records, class_texts, level=args.level)
    _emit_result(result, args.out)
    return 0


def cmd_inspect(args):
    config, tensors, extra = load_checkpoint(args.ckpt)
    summary = {
        "config": config,
        "step": extra.get("step"),
        "n_tensors": len(tensors),
        "tensors": {k: list(v.shape) for k, v in sorted(tensors.items())},
    }
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "gradcheck": cmd_gradcheck,
    "probe": cmd_probe,
    "zeroshot": cmd_zeroshot,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return 3
    except (CorpusError, PatchingError, evaluation.EvaluationError, ValueError,
            OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
