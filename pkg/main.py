#!/usr/bin/env python3
"""
Command-line entry point.

    python main.py synth-data --preset desk --data-dir data/synthetic
    python main.py train --preset desk --data-dir data/synthetic --output-dir runs/desk
    python main.py generate --preset desk --checkpoint runs/desk/model.ckpt --output-dir runs/desk
    python main.py evaluate --results runs/desk/results.json --output-dir runs/desk
    python main.py bench --output-dir runs/bench
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional

from api.config import PRESETS, load_config
from api.errors import ReportEngineError
from api.services.engine import cmd_bench, cmd_evaluate, cmd_generate, cmd_synth_data, cmd_train

logger = logging.getLogger(__name__)

# flag name -> dotted RunConfig field
OVERRIDES = {
    "data_dir": "data.data_dir",
    "manifest": "data.manifest",
    "image_size": "data.image_size",
    "num_samples": "data.num_samples",
    "data_seed": "data.seed",
    "backbone": "model.backbone",
    "block_kind": "model.block_kind",
    "decoder_kind": "model.decoder_kind",
    "scan_mode": "model.scan_mode",
    "n_pairs": "context.n_pairs",
    "strategy": "context.strategy",
    "fixed_pair": "context.fixed_pair",
    "residual_stage": "context.residual_stage",
    "context_seed": "context.seed",
    "template": "prompt.template",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "learning_rate": "train.learning_rate",
    "seed": "train.seed",
    "tensorboard": "train.tensorboard",
    "beam_width": "generate.beam_width",
    "max_len": "generate.max_len",
    "lengths": "bench.lengths",
    "repeats": "bench.repeats",
    "output_dir": "output_dir",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON RunConfig file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="dataset-style preset")
    parser.add_argument("--output-dir")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-dir")
    parser.add_argument("--manifest")
    parser.add_argument("--image-size", type=int)


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backbone", choices=["miniature", "tiny", "small", "base"])
    parser.add_argument("--block-kind", choices=["vmamba", "attention"])
    parser.add_argument("--decoder-kind", choices=["ssm", "attention"])
    parser.add_argument("--scan-mode", choices=["sequential", "parallel"])
    parser.add_argument("--n-pairs", type=int, help="context pairs per query (0 disables context)")
    parser.add_argument("--strategy", choices=["label", "keyword", "random"])
    parser.add_argument("--fixed-pair", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument(
        "--residual-stage", choices=["after_projection_text", "after_projection", "before_projection"]
    )
    parser.add_argument("--context-seed", type=int)
    parser.add_argument("--template")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Context-residual report generation on a selective-scan core")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth-data", help="write a synthetic image/report dataset")
    _add_common(synth)
    _add_data(synth)
    synth.add_argument("--num-samples", type=int)
    synth.add_argument("--data-seed", type=int)

    train = sub.add_parser("train", help="train a report generator")
    _add_common(train)
    _add_data(train)
    _add_model(train)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--learning-rate", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--tensorboard", action=argparse.BooleanOptionalAction, default=None)

    generate = sub.add_parser("generate", help="decode reports for one split")
    _add_common(generate)
    _add_data(generate)
    generate.add_argument("--checkpoint", required=True)
    generate.add_argument("--split", choices=["train", "val", "test"])
    generate.add_argument("--beam-width", type=int)
    generate.add_argument("--max-len", type=int)

    evaluate = sub.add_parser("evaluate", help="score a results file")
    _add_common(evaluate)
    evaluate.add_argument("--results", required=True)

    bench = sub.add_parser("bench", help="time the selective scan against causal attention")
    _add_common(bench)
    bench.add_argument("--lengths", type=int, nargs="+")
    bench.add_argument("--repeats", type=int)
    return parser


def overrides_from(args: argparse.Namespace) -> Dict:
    return {dotted: getattr(args, flag) for flag, dotted in OVERRIDES.items() if getattr(args, flag, None) is not None}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        config = load_config(args.config, args.preset, overrides_from(args))
        if args.command == "synth-data":
            manifest = cmd_synth_data(config)
            logger.info(f"Wrote {len(manifest.records)} samples to {config.data.data_dir}")
        elif args.command == "train":
            result = cmd_train(config)
            logger.info(f"Final per-token loss {result.final_loss:.4f}; checkpoint {result.checkpoint}")
        elif args.command == "generate":
            path = cmd_generate(config, args.checkpoint, args.split)
            logger.info(f"Results written to {path}")
        elif args.command == "evaluate":
            report = cmd_evaluate(config, args.results)
            print(report.table())
        elif args.command == "bench":
            _, table = cmd_bench(config)
            print(table)
    except (ReportEngineError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
