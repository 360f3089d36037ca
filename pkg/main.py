# main.py
"""
brushgym command line.

    python main.py [--config FILE] [--output-dir DIR] [--seed N] <command> ...

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from config import apply_overrides, dotted_overrides, load_config
from errors import BrushGymError
from orchestrator import Orchestrator

logger = logging.getLogger("brushgym")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brushgym", description="Stroke-based painting agent toolkit")
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--output-dir", help="Directory for every output of this run")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed and BRUSHGYM_SEED")
    parser.add_argument("--log-level", default=os.getenv("BRUSHGYM_LOG_LEVEL", "INFO"))
    commands = parser.add_subparsers(dest="command", required=True)

    train_rl = commands.add_parser("train-rl", help="Policy-gradient training with curriculum")
    train_rl.add_argument("--curriculum", type=_on_off, default=None, help="on|off")
    train_rl.add_argument("--episodes", type=int)
    train_rl.add_argument("--workers", type=int)
    train_rl.add_argument("--corpus", help="Directory of reference images (default: procedural desk corpus)")
    train_rl.add_argument("--init-from", help="Checkpoint to start from, e.g. a train-bc result")

    train_bc = commands.add_parser("train-bc", help="Behavior cloning from SVG glyphs")
    train_bc.add_argument("--corpus", help="Directory of KanjiVG-layout SVG files")
    train_bc.add_argument("--epochs", type=int)

    rollout = commands.add_parser("rollout", help="Paint a reference image with a checkpoint")
    rollout.add_argument("--checkpoint", required=True)
    rollout.add_argument("--reference", required=True)
    rollout.add_argument("--max-strokes", type=int)
    rollout.add_argument("--frames", action="store_true", help="Also write one PNG per stroke")

    calibrate = commands.add_parser("calibrate", help="Pressure and projection calibration")
    calibrate.add_argument("--a-step", type=float)
    calibrate.add_argument("--one-sided", action="store_true", default=None)
    calibrate.add_argument("--strokes", help="strokes.json from rollout to export as the demo trajectory")

    evaluate = commands.add_parser("eval", help="Evaluate checkpoints on seeded patches")
    evaluate.add_argument("checkpoints", nargs="+")
    evaluate.add_argument("--patches", type=int)
    evaluate.add_argument("--corpus", help="Directory of reference images to cut patches from")

    export = commands.add_parser("export", help="Stroke list + calibration -> robot trajectory CSV")
    export.add_argument("--strokes", required=True)
    export.add_argument("--calibration", required=True)

    fixtures = commands.add_parser("fixtures", help="Write the bundled glyph fixtures")
    fixtures.add_argument("directory", nargs="?")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {
        "paths.output_dir": args.output_dir,
        "training.seed": args.seed,
        "training.episodes": getattr(args, "episodes", None),
        "training.workers": getattr(args, "workers", None),
        "bc.epochs": getattr(args, "epochs", None),
        "calibration.a_step": getattr(args, "a_step", None),
        "calibration.one_sided": getattr(args, "one_sided", None),
        "eval.patches": getattr(args, "patches", None),
    }
    corpus = getattr(args, "corpus", None)
    if args.command == "train-bc":
        flags["paths.glyphs"] = corpus
    else:
        flags["paths.corpus"] = corpus
    return dotted_overrides(flags)


def run(args: argparse.Namespace) -> Dict[str, Any]:
    config = apply_overrides(load_config(args.config), collect_overrides(args))
    with Orchestrator(config, seed=args.seed) as orchestrator:
        if args.command == "train-rl":
            return orchestrator.cmd_train_rl(args.curriculum, args.init_from)
        if args.command == "train-bc":
            return orchestrator.cmd_train_bc()
        if args.command == "rollout":
            return orchestrator.cmd_rollout(args.checkpoint, args.reference, args.max_strokes, args.frames)
        if args.command == "calibrate":
            return orchestrator.cmd_calibrate(args.strokes)
        if args.command == "eval":
            return orchestrator.cmd_eval(args.checkpoints).model_dump()
        if args.command == "export":
            return orchestrator.cmd_export(args.strokes, args.calibration)
        return orchestrator.cmd_fixtures(args.directory)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except BrushGymError as e:
        logger.error(f"{args.command} failed: {e.message}")
        return e.exit_code
    except Exception:
        logger.exception(f"{args.command} failed with an internal error")
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
