# polarseg/main.py
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from api.commands import COMMANDS
from api.models import CliConfig
from api.presets import CLASS_SCHEMAS, preset_names
from config import logger, settings
from core.errors import InputValidationError, PolarSegError

# flag dest -> dotted CliConfig key
_TRAIN_FLAGS = {"epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.lr",
                "crop": "train.crop", "eval_shards": "train.eval_shards"}


def create_parser() -> argparse.ArgumentParser:
    """
    Builds the command-line parser: global flags plus one subparser per command.
    Flags default to SUPPRESS so only flags actually given override the config file.
    """
    parser = argparse.ArgumentParser(
        prog="polarseg",
        description="Polarization-driven semantic segmentation toolkit: derive AoLP/DoLP, "
                    "synthesize RGB-P scenes, train and evaluate EAFNet presets.",
    )
    parser.add_argument("--config", type=Path, help="JSON run configuration; flags override its values.")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Global seed (u64).")
    parser.add_argument("--out", default=argparse.SUPPRESS, help=f"Output directory (default {settings.OUTPUT_DIR}).")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--root", default=argparse.SUPPRESS, help="Dataset root with <split>/<id>/ folders.")
        p.add_argument("--split", choices=["train", "val"], default=argparse.SUPPRESS)
        p.add_argument("--synthetic", action="store_true", default=argparse.SUPPRESS,
                       help="Use generated scenes instead of --root.")
        p.add_argument("--scene", dest="scene_preset", default=argparse.SUPPRESS,
                       choices=["default", "two_material", "low_polarization", "obstacle"])
        p.add_argument("--synthetic-train", type=int, default=argparse.SUPPRESS)
        p.add_argument("--synthetic-val", type=int, default=argparse.SUPPRESS)
        p.add_argument("--schema", dest="schema_name", choices=sorted(CLASS_SCHEMAS), default=argparse.SUPPRESS)

    derive = sub.add_parser("derive", help="Write AoLP/DoLP PDER files and previews.")
    data_flags(derive)
    derive.add_argument("--mode", default=argparse.SUPPRESS, choices=["aolp", "dolp", "aolp_dolp", "disparity", "all"])

    stats = sub.add_parser("stats", help="Histogram of one normalized channel as CSV.")
    data_flags(stats)
    stats.add_argument("--kind", default=argparse.SUPPRESS, choices=["aolp", "dolp", "disparity", "s0"])
    stats.add_argument("--bins", type=int, default=argparse.SUPPRESS)

    synth = sub.add_parser("synth", help="Export synthetic scenes in the dataset layout.")
    data_flags(synth)

    run = sub.add_parser("run", help="Train and evaluate an experiment preset.")
    run.add_argument("preset", choices=preset_names())
    data_flags(run)
    for flag, kind in (("--epochs", int), ("--batch-size", int), ("--lr", float), ("--crop", int),
                       ("--eval-shards", int)):
        run.add_argument(flag, type=kind, default=argparse.SUPPRESS)
    run.add_argument("--widths", type=int, nargs=5, default=argparse.SUPPRESS)
    run.add_argument("--blocks-per-stage", type=int, default=argparse.SUPPRESS)
    run.add_argument("--decoder-width", type=int, default=argparse.SUPPRESS)

    for name, help_text in (("eval", "Evaluate a checkpoint."), ("infer", "Write palette segmentation PNGs."),
                            ("attn", "Dump EAC attention weights of a fused checkpoint.")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        data_flags(p)
        p.add_argument("--eval-shards", type=int, default=argparse.SUPPRESS)
        if name == "attn":
            p.add_argument("--stage", dest="attention_stage", default=argparse.SUPPRESS)
            p.add_argument("--channels", dest="attention_channels", type=int, default=argparse.SUPPRESS)

    verify = sub.add_parser("verify", help="Run the built-in property checks.")
    verify.add_argument("--check", dest="checks", action="append", default=argparse.SUPPRESS)
    return parser


def _set_dotted(target: Dict[str, Any], key: str, value: Any) -> None:
    *parents, leaf = key.split(".")
    for part in parents:
        target = target.setdefault(part, {})
    target[leaf] = value


def merge_config(args: argparse.Namespace) -> CliConfig:
    """JSON file values first, then every flag the user gave."""
    values: Dict[str, Any] = {"seed": settings.DEFAULT_SEED, "out": settings.OUTPUT_DIR}
    if args.config is not None:
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise InputValidationError(f"Cannot read config file {args.config}: {e}") from e
        if not isinstance(file_values, dict):
            raise InputValidationError("Config file must hold a JSON object")
        values.update(file_values)
    for dest, value in vars(args).items():
        if dest == "config":
            continue
        _set_dotted(values, _TRAIN_FLAGS.get(dest, dest), value)
    try:
        return CliConfig.model_validate(values)
    except ValidationError as e:
        raise InputValidationError("Invalid configuration", details={"errors": e.errors(include_url=False)}) from e


def main(argv: Optional[List[str]] = None) -> int:
    args = create_parser().parse_args(argv)
    try:
        cfg = merge_config(args)
        logger.info(f"Effective config: {cfg.model_dump_json()}")
        logger.info(f"Starting '{cfg.command}'")
        summary = COMMANDS[cfg.command](cfg)
        logger.info(f"Finished '{cfg.command}': {json.dumps(summary, default=str)}")
        return 0
    except ValidationError as e:
        logger.error(f"Invalid value: {e}")
        return InputValidationError("Invalid value").exit_code
    except PolarSegError as e:
        logger.error(f"{type(e).__name__}: {e.message} - Details: {e.details}")
        return e.exit_code
    except Exception:
        logger.exception(f"Unexpected error while running '{args.command}'")
        return 1


if __name__ == "__main__":
    sys.exit(main())
