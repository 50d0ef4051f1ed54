"""
Command-line entry point.

    python src/cli.py gen-corpus --out runs/full
    python src/cli.py train-clap --out runs/full --profile desk
    python src/cli.py train-vc --out runs/full
    python src/cli.py build-store --out runs/full
    python src/cli.py convert --mode retrieval --source 5 --prompt "very happy voice" --intensity 1.5
    python src/cli.py evaluate --out runs/full --compare runs/no-aig
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config.settings import LOG_LEVEL, OUT_DIR, SEED
from errors import EvcError
from pipeline import MODES, Pipeline
from util import RunConfig

PROFILES = {"default": RunConfig, "desk": RunConfig.desk, "full": RunConfig.full}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--profile", choices=sorted(PROFILES), default="default", help="base profile when no --config is given")
    common.add_argument("--seed", type=int, help="root seed of every random stream")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--no-emo-label", action="store_true", help="train CLAP without categorical emotion labels")
    common.add_argument("--loss", choices=["symkl", "kl"], help="CLAP loss variant")
    common.add_argument("--no-aig", action="store_true", help="bypass the adaptive intensity gate")

    parser = argparse.ArgumentParser(prog="emovc", description="Emotional voice conversion on a synthetic corpus")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen-corpus", parents=[common], help="generate and split the synthetic corpus")
    commands.add_parser("train-clap", parents=[common], help="train EVC-CLAP")

    train_vc = commands.add_parser("train-vc", parents=[common], help="train FuEncoder and the CFM decoder")
    train_vc.add_argument("--iterations", type=int, help="total training steps")
    train_vc.add_argument("--resume", action="store_true", help="continue from the saved VC checkpoint")

    commands.add_parser("build-store", parents=[common], help="embed the reference corpus")

    convert = commands.add_parser("convert", parents=[common], help="convert one utterance")
    convert.add_argument("--mode", choices=MODES, required=True)
    convert.add_argument("--source", type=int, required=True, help="source utterance id")
    convert.add_argument("--intensity", type=float, default=1.0, help="emotion intensity in [0, 2]")
    convert.add_argument("--reference", type=int, help="reference utterance id (reference mode)")
    convert.add_argument("--prompt", help="emotion prompt (prompt and retrieval modes)")
    convert.add_argument("--emotion", type=int, help="target emotion id for prompt-mode metrics")

    evaluate = commands.add_parser("evaluate", parents=[common], help="write metric and plot tables")
    evaluate.add_argument("--compare", type=Path, nargs="*", default=[], help="other run directories for the ablation table")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        config = RunConfig.load(args.config)
    else:
        config = PROFILES[args.profile]()
        config.out_dir = OUT_DIR
        config.seed = SEED
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = str(args.out)
    if args.no_emo_label:
        config.ablation.use_emo_label = False
    if args.loss is not None:
        config.ablation.loss_variant = args.loss
    if args.no_aig:
        config.ablation.use_aig = False
    config.validate()
    return config


def run(args: argparse.Namespace) -> None:
    logger = logging.getLogger(__name__)
    pipeline = Pipeline(resolve_config(args))
    if args.command == "gen-corpus":
        pipeline.gen_corpus()
    elif args.command == "train-clap":
        pipeline.train_clap()
    elif args.command == "train-vc":
        pipeline.train_vc(iterations=args.iterations, resume=args.resume)
    elif args.command == "build-store":
        store = pipeline.build_store()
        logger.info(f"Reference store holds {len(store)} utterances")
    elif args.command == "convert":
        report = pipeline.convert(args.mode, args.source, args.intensity, args.reference, args.prompt, args.emotion)
        pipeline.out_dir.mkdir(parents=True, exist_ok=True)
        name = f"conversion_{args.mode}_{args.source}_{args.intensity:g}.json"
        with open(pipeline.path(name), "w", encoding="utf-8") as handle:
            json.dump(report.to_dict(), handle, sort_keys=True)
        logger.info(f"Report written to {pipeline.path(name)}: {report.metrics}")
    elif args.command == "evaluate":
        result = pipeline.evaluate(args.compare)
        logger.info(f"Spearman rho per mode: {result['spearman']}")


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except EvcError as e:
        logging.getLogger(__name__).error(f"Error in {args.command}: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
