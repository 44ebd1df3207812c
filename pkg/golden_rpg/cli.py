"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Command line entry point:

    golden-rpg [--verbose | --quiet] [--config FILE] [--preset NAME] [--force] COMMAND ...

Commands: gen-corpus, train, predict, eval, report, pipeline, selftest.
Usage errors exit with 2, runtime failures with 1 after one structured
`error: {...}` line on stderr.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from .commons import GoldenRPG
from .config import VARIANTS, RunConfig, load_config
from .errors import GoldenRPGError, TrainingAborted
from .pipeline import (RunPipeline, apply_runtime, eval_file, gen_corpus_file, predict_file, report_file,
                       train_file)
from .progress_dialog import ProgressDialog
from .report import STYLES
from .selftest import run_selftest

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="golden-rpg",
                                     description="Region-aware golden noise prediction at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {GoldenRPG.getVersion()}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only, no progress bars.")
    parser.add_argument("--config", help="JSON configuration file layered over the defaults.")
    parser.add_argument("--preset", choices=GoldenRPG.listPresets() or None, help="Packaged configuration preset.")
    parser.add_argument("--force", action="store_true", help="Accept checkpoints written under another configuration.")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    corpus = commands.add_parser("gen-corpus", help="Generate a synthetic training corpus.")
    corpus.add_argument("-o", "--output", required=True, help="Corpus file to write.")
    corpus.add_argument("--size", type=int, help="Number of records.")
    corpus.add_argument("--seed", type=int, help="Corpus seed.")
    corpus.add_argument("--mix", type=float, help="Fraction of regional prompts, 0 gives near-duplicate regions.")

    train = commands.add_parser("train", help="Train one adapter variant on a corpus.")
    train.add_argument("--corpus", required=True, help="Corpus file.")
    train.add_argument("-o", "--output", required=True, help="Checkpoint file to write.")
    train.add_argument("--variant", choices=VARIANTS, help="Adapter variant.")
    train.add_argument("--epochs", type=int, help="Training epochs.")
    train.add_argument("--batch-size", type=int, help="Records per optimizer step.")
    train.add_argument("--lr", type=float, help="Peak learning rate.")
    train.add_argument("--seed", type=int, help="Split, shuffle and dropout seed.")
    train.add_argument("--warm-start", help="Checkpoint whose FiLM and RCA blocks initialize the run.")
    train.add_argument("--history", help="Per-epoch history CSV to write.")

    predict = commands.add_parser("predict", help="Predict golden noise for a prompt manifest.")
    predict.add_argument("--checkpoint", required=True, help="Trained checkpoint.")
    predict.add_argument("--manifest", required=True, help="JSON prompt manifest.")
    predict.add_argument("-o", "--output", required=True, help="Named-array file to write.")
    predict.add_argument("--sigma-init", type=float, help="Scheduler init sigma, also writes z_scaled/<id>.")
    predict.add_argument("--diagnostics", help="JSON lines file with gamma, beta and alpha per prompt.")

    evaluate = commands.add_parser("eval", help="Score baselines and checkpoints on the benchmark prompts.")
    evaluate.add_argument("checkpoints", nargs="*", help="Checkpoints of the adapter variants to evaluate.")
    evaluate.add_argument("-o", "--output", required=True, help="Per-image metric CSV to write.")
    evaluate.add_argument("--methods", nargs="+", help="Methods to score, defaults to the configured list.")
    evaluate.add_argument("--prompts", type=int, help="Benchmark prompt count.")
    evaluate.add_argument("--seeds", type=int, help="Seeds per prompt.")
    evaluate.add_argument("--seed", type=int, help="Benchmark seed.")
    evaluate.add_argument("--scenes", help="Named-array file for the rendered scenes.")

    report = commands.add_parser("report", help="Render tables from a metric CSV.")
    report.add_argument("input", help="Metric CSV written by eval.")
    report.add_argument("-o", "--output", required=True, help="Table CSV to write.")
    report.add_argument("--style", choices=STYLES, default="table", help="Table layout.")
    report.add_argument("--text", help="Aligned text table to write.")
    report.add_argument("--category", help="Prompt category for the showcase.")
    report.add_argument("--method", default="v4", help="Method highlighted by the showcase.")

    pipeline = commands.add_parser("pipeline", help="Corpus, training, evaluation and table in one folder.")
    pipeline.add_argument("-o", "--output", required=True, help="Run folder.")
    pipeline.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS),
                          help="Variants to train.")
    pipeline.add_argument("--epochs", type=int, help="Training epochs per variant.")
    pipeline.add_argument("--size", type=int, help="Corpus records.")

    commands.add_parser("selftest", help="Run the built-in invariant checks.")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags mapped to dotted configuration keys; unset flags are skipped."""
    command = args.command
    overrides: Dict[str, Any] = {}
    if command in ("gen-corpus", "pipeline"):
        overrides.update({"corpus.size": args.size})
    if command == "gen-corpus":
        overrides.update({"corpus.seed": args.seed, "corpus.mix": args.mix})
    if command in ("train", "pipeline"):
        overrides["train.epochs"] = args.epochs
    if command == "train":
        overrides.update({"train.variant": args.variant, "train.batch_size": args.batch_size, "train.lr": args.lr,
                          "train.seed": args.seed, "train.warm_start": args.warm_start})
    if command == "eval":
        overrides.update({"eval.methods": args.methods, "eval.prompts": args.prompts, "eval.seeds": args.seeds,
                          "eval.seed": args.seed})
    return {key: value for key, value in overrides.items() if value is not None}


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    ProgressDialog.setEnabled(not quiet)


def _reportError(command: str, error: BaseException):
    line = json.dumps({"command": command, "type": type(error).__name__, "message": str(error)}, sort_keys=True)
    sys.stderr.write(f"error: {line}\n")


def _dispatch(args: argparse.Namespace, config: RunConfig) -> int:
    command = args.command
    if command == "gen-corpus":
        corpus = gen_corpus_file(config, args.output)
        logger.info("Corpus of %d records written to %s", len(corpus.records), args.output)
    elif command == "train":
        train_file(config, args.corpus, args.output, args.history, args.force)
    elif command == "predict":
        predict_file(config, args.checkpoint, args.manifest, args.output, args.sigma_init, args.diagnostics,
                     args.force)
    elif command == "eval":
        report = eval_file(config, args.checkpoints, args.output, args.scenes, args.force)
        if not report.complete:
            missing = sum(row.missing for row in report.rows)
            raise GoldenRPGError(f"{missing} of {len(report.rows)} report rows have no image; the report at "
                                 f"{args.output} is incomplete.")
    elif command == "report":
        artifact = report_file(config, args.input, args.style, args.output, args.text, args.category, args.method)
        sys.stdout.write(artifact.text + "\n")
    elif command == "pipeline":
        run = RunPipeline.runPipeline(config, args.output, args.variants)
        logger.info("Pipeline finished with %d stages in %s", len(run.stages), run.folder)
    elif command == "selftest":
        outcome = run_selftest(config)
        sys.stdout.write(outcome.summary() + "\n")
        return 0 if outcome.passed else 1
    return 0


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exit_request:
        return int(exit_request.code or 0)
    configure_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.preset, args.config, _overrides(args))
        apply_runtime(config)
        return _dispatch(args, config)
    except TrainingAborted as error:
        if error.checkpoint_path:
            logger.error("Last good checkpoint saved to %s", error.checkpoint_path)
        _reportError(args.command, error)
    except Exception as error:
        logger.debug("%s failed", args.command, exc_info=True)
        _reportError(args.command, error)
    return 1


def main(argv: Optional[List[str]] = None):
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
