"""Command-line entry points.

Subcommands: train, eval, spectrum, attn-dump, lowres, synth-gen.
Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .data import (
    Corpus,
    SyntheticTaskSpec,
    Vocab,
    generate_copy_corpus,
    load_jsonl,
    make_task_splits,
    save_jsonl,
)
from .errors import NumericError, PrefixLabError
from .training import (
    TrainConfig,
    run_attn_dump,
    run_eval,
    run_lowresource,
    run_spectrum,
    run_train,
)

_CONFIG_FLAGS = [f.name for f in fields(TrainConfig)]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration overrides")
    group.add_argument("--config", help="INI file with a [run] section")
    for name in _CONFIG_FLAGS:
        group.add_argument("--" + name.replace("_", "-"), dest=name,
                           metavar="V", default=None)


def _build_config(args) -> TrainConfig:
    overrides = {name: getattr(args, name) for name in _CONFIG_FLAGS
                 if getattr(args, name, None) is not None}
    if args.config:
        return TrainConfig.from_ini(args.config, overrides)
    return TrainConfig.from_strings(overrides)


def _load_splits(data_dir: str) -> dict[str, Corpus]:
    root = Path(data_dir)
    vocab = Vocab.load(root / "vocab.txt")
    return {split: load_jsonl(root / f"{split}.jsonl", vocab=vocab, name=split)
            for split in ("train", "val", "test")}


def _load_eval_corpus(path: str, checkpoint: str) -> Corpus:
    vocab_path = Path(checkpoint) / "vocab.txt"
    vocab = Vocab.load(vocab_path) if vocab_path.exists() else None
    return load_jsonl(path, vocab=vocab)


def cmd_synth_gen(args) -> int:
    spec = SyntheticTaskSpec(
        n_segments=args.n_segments, segment_length=args.segment_length,
        distractor_vocab=args.distractor_vocab,
        salient_vocab=args.salient_vocab, contrast_vocab=args.contrast_vocab,
        seed=args.seed,
        target_rule=args.task if args.task != "copy" else "salient")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "copy":
        counts = [("train", args.n_train), ("val", args.n_val),
                  ("test", args.n_test)]
        splits = {name: generate_copy_corpus(spec, count, seed=spec.seed + i,
                                             name=name)
                  for i, (name, count) in enumerate(counts)}
    else:
        splits = make_task_splits(spec, args.n_train, args.n_val, args.n_test)
    for name, corpus in splits.items():
        save_jsonl(corpus, out / f"{name}.jsonl")
    splits["train"].vocab.save(out / "vocab.txt")
    with open(out / "task.ini", "w", encoding="utf-8") as fh:
        fh.write("[task]\n")
        fh.write(f"task = {args.task}\n")
        for key in ("n_segments", "segment_length", "salient_vocab",
                    "contrast_vocab", "distractor_vocab", "seed"):
            fh.write(f"{key} = {getattr(spec, key)}\n")
    print(f"wrote {', '.join(sorted(splits))} and vocab to {out}")
    return 0


def cmd_train(args) -> int:
    config = _build_config(args)
    splits = _load_splits(args.data_dir)
    report = run_train(config, splits, Path(args.out_dir))
    mean = report.mean_scores()
    print(f"trained {len(report.seed_results)} seed(s) in "
          f"{report.wall_clock:.1f}s; reports in {args.out_dir}")
    if mean:
        print(f"mean test R1/R2/RL = {mean['rouge1']:.4f}/"
              f"{mean['rouge2']:.4f}/{mean['rougeL']:.4f}")
    return 0


def cmd_eval(args) -> int:
    corpus = _load_eval_corpus(args.data, args.checkpoint)
    means = run_eval(args.checkpoint, corpus, beam=args.beam,
                     outdir=Path(args.out_dir),
                     max_decode_len=args.max_decode_len)
    print(f"test R1/R2/RL = {means['rouge1']:.4f}/{means['rouge2']:.4f}/"
          f"{means['rougeL']:.4f} ({len(corpus)} examples)")
    return 0


def cmd_spectrum(args) -> int:
    corpus = _load_eval_corpus(args.data, args.checkpoint)
    report = run_spectrum(args.checkpoint, corpus, n_examples=args.n_examples,
                          outdir=Path(args.out_dir),
                          prefix_slice=not args.full_matrix,
                          lower_band=args.lower_band)
    for band in sorted(report.curves):
        print(f"{band}: auc={report.auc[band]:.4f} "
              f"(n={report.sample_counts[band]})")
    return 0


def cmd_attn_dump(args) -> int:
    corpus = _load_eval_corpus(args.data, args.checkpoint)
    maps = run_attn_dump(args.checkpoint, corpus, args.example,
                         Path(args.out_dir))
    print(f"wrote {len(maps)} attention heatmaps and mask dumps to "
          f"{args.out_dir}")
    return 0


def cmd_lowres(args) -> int:
    config = _build_config(args)
    splits = _load_splits(args.data_dir)
    ks = tuple(float(k) if "." in k else int(k)
               for k in args.ks.replace(" ", "").split(","))
    rows = run_lowresource(config, splits, ks, Path(args.out_dir))
    print(f"low-resource sweep: {len(rows)} runs "
          f"({len(ks)} k-values x {len(config.seeds)} seeds); "
          f"tables in {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefixlab",
        description="Train and analyze prefix-tuned miniature transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("synth-gen", help="generate synthetic corpora")
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--task", default="salient",
                     choices=["salient", "contrast", "mixed", "copy"])
    gen.add_argument("--n-train", type=int, default=2000)
    gen.add_argument("--n-val", type=int, default=200)
    gen.add_argument("--n-test", type=int, default=200)
    gen.add_argument("--n-segments", type=int, default=2)
    gen.add_argument("--segment-length", type=int, default=5)
    gen.add_argument("--salient-vocab", type=int, default=16)
    gen.add_argument("--contrast-vocab", type=int, default=0)
    gen.add_argument("--distractor-vocab", type=int, default=28)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_synth_gen)

    train = sub.add_parser("train", help="train over the configured seeds")
    train.add_argument("--data-dir", required=True)
    train.add_argument("--out-dir", required=True)
    _add_config_flags(train)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="decode and ROUGE-score a corpus")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--beam", type=int, default=None)
    ev.add_argument("--max-decode-len", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    spec = sub.add_parser("spectrum", help="singular-value spectrum report")
    spec.add_argument("--checkpoint", required=True)
    spec.add_argument("--data", required=True)
    spec.add_argument("--out-dir", required=True)
    spec.add_argument("--n-examples", type=int, default=200)
    spec.add_argument("--full-matrix", action="store_true")
    spec.add_argument("--lower-band", type=int, default=None)
    spec.set_defaults(func=cmd_spectrum)

    dump = sub.add_parser("attn-dump", help="attention heatmaps and mask dump")
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--data", required=True)
    dump.add_argument("--out-dir", required=True)
    dump.add_argument("--example", type=int, default=0)
    dump.set_defaults(func=cmd_attn_dump)

    low = sub.add_parser("lowres", help="k%% subsample sweep")
    low.add_argument("--data-dir", required=True)
    low.add_argument("--out-dir", required=True)
    low.add_argument("--ks", default="5,10,25,50")
    _add_config_flags(low)
    low.set_defaults(func=cmd_lowres)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (PrefixLabError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
