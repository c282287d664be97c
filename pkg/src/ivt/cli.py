"""Command-line entry point.

Exit codes: 0 on success, 2 for usage or configuration errors, 3 when a run
aborts at runtime (for instance on a non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ivt.checkpoint import CheckpointError
from ivt.config import ConfigError, RunConfig
from ivt.dataset import DatasetError, generate_corpus, load_corpus
from ivt.encoder import ConfigError as ModelConfigError
from ivt.evaluation import EvaluationError
from ivt.training import NonFiniteLossError

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3

log = logging.getLogger("ivt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def cmd_generate_corpus(args) -> int:
    corpus = generate_corpus(args.ids, args.images_per_id, args.captions_per_image, (args.height, args.width), args.seed)
    corpus.save(args.out)
    sizes = {name: (len(s), len(s.identities)) for name, s in corpus.splits.items()}
    print("corpus %s: " % args.out + ", ".join(f"{n} {p} pairs / {i} ids" for n, (p, i) in sizes.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    from ivt.pipeline import run_training

    cfg = RunConfig.load(args.config, args.set)
    state = run_training(cfg, resume=args.resume, stop_at=args.stop_at)
    last = state.history[-1] if state.history else {}
    print(f"trained to step {state.step}; loss {last.get('total', float('nan')):.4f}; outputs in {cfg['output_dir']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from ivt.pipeline import evaluate_checkpoint

    if not args.oracle and not args.checkpoint:
        raise UsageError("--checkpoint is required unless --oracle is given")
    corpus = load_corpus(args.corpus)
    if args.oracle and not corpus.ground_truth:
        raise UsageError("--oracle needs a corpus with ground_truth.json")
    metrics = evaluate_checkpoint(args.checkpoint, corpus, args.split, args.out, args.metric, tuple(args.ks), args.k, args.oracle)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    from ivt.checkpoint import Checkpoint
    from ivt.evaluation import word_heatmap
    from ivt.pipeline import heatmap_probes, write_heatmaps
    from ivt.training import load_model

    model, vocab = load_model(Checkpoint.load(args.checkpoint))
    model.eval()
    corpus = load_corpus(args.corpus)
    split = corpus.split(args.split)
    if args.word:
        images, _, keys = split.gallery()
        probes = [{"key": k, "slot": "word", "word": args.word, "image": img,
                   "heat": word_heatmap(args.word, img, model, vocab, args.metric)}
                  for img, k in list(zip(images, keys))[: args.limit]]
    else:
        if not corpus.ground_truth:
            raise UsageError("probing attribute bands needs ground_truth.json; pass --word instead")
        probes = heatmap_probes(model, vocab, corpus, split, args.metric, args.limit)
    write_heatmaps(probes, args.out)
    hits = [p["inside"] > p["outside"] for p in probes if "inside" in p]
    if hits:
        print(f"{len(probes)} heat maps; band hit rate {sum(hits) / len(hits):.3f}")
    else:
        print(f"{len(probes)} heat maps written to {args.out}")
    return EXIT_OK


def cmd_ablate_mask_ratio(args) -> int:
    from ivt.pipeline import ablate_mask_ratio

    cfg = RunConfig.load(args.config, args.set)
    if any(not 0.0 <= r < 1.0 for r in args.ratios):
        raise UsageError("ratios must lie in [0, 1)")
    cfg = cfg.replace(mla__enabled=False)
    out = Path(args.out or cfg["output_dir"])
    rows = ablate_mask_ratio(cfg, args.ratios, args.seeds, out)
    for row in rows:
        print(f"ratio {row['ratio']:.2f}  R1 {row['R1']:.4f}  mAP {row['mAP']:.4f}")
    return EXIT_OK


def cmd_timing(args) -> int:
    from ivt.pipeline import time_retrieval

    if args.gallery_size <= 0:
        raise UsageError("--gallery-size must be positive")
    if args.queries <= 0:
        raise UsageError("--queries must be positive")
    report = time_retrieval(args.checkpoint, args.gallery_size, args.queries, args.seed, args.repeats)
    print(json.dumps(report, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ivt", description="Text-based person retrieval with a unified image/text encoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-corpus", help="render a synthetic person corpus")
    g.add_argument("--ids", type=int, default=64)
    g.add_argument("--images-per-id", type=int, default=4)
    g.add_argument("--captions-per-image", type=int, default=2)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_corpus)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop (and checkpoint) at this step")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="retrieval metrics and a ranked report")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out", required=True)
    e.add_argument("--k", type=int, default=5, help="results per query in the report")
    e.add_argument("--ks", type=int, nargs="+", default=[1, 5, 10])
    e.add_argument("--metric", default="cosine", choices=["cosine", "dot"])
    e.add_argument("--oracle", action="store_true", help="score with the ground-truth attribute oracle")
    e.set_defaults(func=cmd_evaluate)

    h = sub.add_parser("heatmap", help="word-to-patch similarity overlays")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--corpus", required=True)
    h.add_argument("--split", default="test", choices=["train", "val", "test"])
    h.add_argument("--out", required=True)
    h.add_argument("--word", help="probe this word on every gallery image instead of attribute bands")
    h.add_argument("--limit", type=int, default=20)
    h.add_argument("--metric", default="cosine", choices=["cosine", "dot"])
    h.set_defaults(func=cmd_heatmap)

    a = sub.add_parser("ablate-mask-ratio", help="train and evaluate one model per masking ratio")
    a.add_argument("--config")
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--ratios", type=float, nargs="+", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate_mask_ratio)

    m = sub.add_parser("timing", help="time gallery encoding, query encoding and ranking")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--gallery-size", type=int, required=True)
    m.add_argument("--queries", type=int, default=100)
    m.add_argument("--repeats", type=int, default=1)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_timing)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ModelConfigError, DatasetError, EvaluationError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
