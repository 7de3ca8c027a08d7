"""Command-line entry point for the full experiment workflow.

Verbs: gen-data, pretrain, align, finetune, evaluate, sweep-r,
export-embeddings, plot. Every verb accepts --config/--seed/--out; the env
var KMTR_NUM_THREADS caps kernel parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import TASKS, ExperimentConfig


def _apply_thread_cap() -> None:
    cap = os.environ.get("KMTR_NUM_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["phantom"] = dataclasses.replace(config.phantom, seed=args.seed)
    if args.out is not None:
        updates["out_dir"] = args.out
    if updates:
        config = dataclasses.replace(config, **updates)
    return config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to an experiment config JSON")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", help="override the experiment output directory")

    parser = argparse.ArgumentParser(prog="kmtr", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the phantom cohort")
    p = sub.add_parser("pretrain", parents=[common], help="Stage I masked-autoencoder pretraining")
    p.add_argument("--domain", choices=["image", "kspace"], required=True)
    sub.add_parser("align", parents=[common], help="Stage II cross-modal alignment")
    p = sub.add_parser("finetune", parents=[common], help="Stage III task fine-tuning")
    p.add_argument("--task", choices=list(TASKS), required=True)
    p.add_argument("--R", type=int, default=None, help="acceleration factor override")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a fine-tuned task checkpoint")
    p.add_argument("--task", choices=list(TASKS), default=None,
                   help="task to evaluate (default: all with checkpoints)")
    p.add_argument("--R", type=int, default=None)
    p.add_argument("--split", choices=["val", "test"], default="test")
    sub.add_parser("sweep-r", parents=[common], help="regression fine-tune/evaluate across R")
    p = sub.add_parser("export-embeddings", parents=[common], help="per-subject embedding CSV")
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p = sub.add_parser("plot", parents=[common], help="render the embedding scatter plot")
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    config = _resolve_config(args)

    from . import pipeline

    if args.verb == "gen-data":
        pipeline.gen_data(config)
    elif args.verb == "pretrain":
        pipeline.stage1_pretrain(args.domain, config)
    elif args.verb == "align":
        pipeline.stage2_align(config)
    elif args.verb == "finetune":
        pipeline.stage3_finetune(args.task, config, R=args.R)
    elif args.verb == "evaluate":
        tasks = [args.task] if args.task else list(TASKS)
        for task in tasks:
            try:
                pipeline.evaluate(task, config, R=args.R, split=args.split)
            except FileNotFoundError as exc:
                if args.task:
                    raise
                logging.getLogger("kmtr").info("skipping %s: %s", task, exc)
    elif args.verb == "sweep-r":
        pipeline.sweep_r(config)
    elif args.verb == "export-embeddings":
        pipeline.export_embeddings(config, split=args.split)
    elif args.verb == "plot":
        pipeline.plot_embeddings(config, split=args.split)
    return 0


if __name__ == "__main__":
    sys.exit(main())
