"""Command-line entry point: preprocess, train, evaluate, inspect, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import DATASETS, ModelConfig, dump_config, load_config, tiny_config
from .gradcheck import run_suite
from .model import MatchingNetwork
from .pipeline import data_root, load_prepared, preprocess, resolve_data_dir
from .training import evaluate, export_selection_weights, load_checkpoint, save_checkpoint, train


def _write_json(record: dict, out: str | None) -> None:
    text = json.dumps(record, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_run_config(args) -> ModelConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.ablate:
        config = config.with_ablations([a.strip() for a in args.ablate.split(",") if a.strip()])
    return config


def cmd_preprocess(args) -> int:
    config = load_config(args.config) if args.config else ModelConfig.for_dataset(args.dataset)
    if config.dataset != args.dataset:
        config = replace(config, dataset=args.dataset)
    out = args.out or data_root() / args.dataset
    manifest = preprocess(args.dataset, args.input, out, config, args.vectors, args.max_dialogues)
    _write_json(manifest, None)
    return 0


def cmd_train(args) -> int:
    config = _load_run_config(args)
    torch.manual_seed(config.seed)
    data_dir = resolve_data_dir(config)
    prepared = load_prepared(data_dir, config)
    train_data = prepared.split("train", config)
    val_data = prepared.split("valid", config)
    model = MatchingNetwork(config, prepared.vocab, prepared.pretrained, prepared.corpus)
    out = Path(args.out) if args.out else data_dir / "checkpoints" / f"{config.hash}.pt"
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train(model, train_data, val_data)
    save_checkpoint(out, model, prepared.vocab, result.history)
    (out.with_suffix(".history.json")).write_text(json.dumps(result.history, indent=2) + "\n")
    _write_json({"checkpoint": str(out), "best_epoch": result.best_epoch, "best_val_r1": result.best_score,
                 "epochs_run": len(result.history)}, None)
    return 0


def cmd_evaluate(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data_dir) if args.data_dir else resolve_data_dir(model.config)
    prepared = load_prepared(data_dir, model.config, expected_vocab_hash=vocab.hash)
    report = evaluate(model, prepared.split(args.split, model.config), buckets=args.buckets)
    _write_json(report.to_dict(), args.out)
    return 0


def cmd_inspect(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data_dir) if args.data_dir else resolve_data_dir(model.config)
    samples = load_prepared(data_dir, model.config, expected_vocab_hash=vocab.hash).samples(args.split)
    if not 0 <= args.sample_id < len(samples):
        raise SystemExit(f"sample id {args.sample_id} outside [0, {len(samples)})")
    record = {"sample_id": args.sample_id, "split": args.split,
              **export_selection_weights(model, samples[args.sample_id], vocab)}
    _write_json(record, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config) if args.config else tiny_config()
    names = [n.strip() for n in args.only.split(",")] if args.only else None
    result = run_suite(config, names=names)
    _write_json(result.to_dict(), args.out)
    return 0 if result.passed() else 1


def cmd_dump_config(args) -> int:
    config = tiny_config() if args.dataset == "synthetic" else ModelConfig.for_dataset(args.dataset)
    sys.stdout.write(dump_config(config))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dck", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="parse raw splits and write caches")
    p.add_argument("--dataset", required=True, choices=DATASETS)
    p.add_argument("--in", dest="input", required=True, help="directory with the raw split files")
    p.add_argument("--out", help="output directory (default $DCK_DATA_DIR/<dataset>)")
    p.add_argument("--config", help="config file for limits and embedding settings")
    p.add_argument("--vectors", help="pretrained word-vector text file")
    p.add_argument("--max-dialogues", type=int, help="keep only the first N dialogues per split")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train with early stopping and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", help="comma-separated ablation flags")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recall metrics of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--buckets", action="store_true", help="add per context-length bucket metrics")
    p.add_argument("--data-dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="export selection weights for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--config", help="64-bit config (default: tiny)")
    p.add_argument("--only", help="comma-separated subset of checks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-config", help="print a default config file")
    p.add_argument("--dataset", default="persona_original", choices=(*DATASETS, "synthetic"))
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
