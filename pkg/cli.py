"""
Command-line entry point for the PiLaMIM laboratory.

    python cli.py pretrain --config configs/toy.toml --set mode=pixel_only --out runs/pixel
    python cli.py probe    --checkpoint runs/pixel/checkpoint_final.bin --data synth:seed=11,count=2000
    python cli.py rankme   --checkpoint runs/pixel/checkpoint_final.bin --data synth:seed=7,count=2000
    python cli.py export   --checkpoint runs/pixel/checkpoint_final.bin --out exports/pixel
    python cli.py report   --checkpoint a.bin --checkpoint b.bin --out reports/ablation

Exit status: 0 on success, 1 on a usage or configuration error, 2 when the
run itself fails.
"""
import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from components.datasets import build_dataset
from components.patching import sample_mask
from pipeline.evaluation import (
    ablation_report,
    export_embeddings,
    extract_features,
    format_report,
    linear_probe,
    rankme,
)
from pipeline.trainer import load_model, pretrain, reconstruct
from utils.config import FEATURE_KINDS, RunConfig, load_config, parse_data_spec, save_resolved
from utils.errors import ConfigMismatchError, ConfigValidationError, PiLaMIMError, UnknownSubcommandError
from utils.logging_utils import logger
from utils.settings import Settings

SUBCOMMANDS = ("pretrain", "probe", "rankme", "export", "report")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    """Bad flag or missing argument"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pilamim", description="Desk-scale PiLaMIM pretraining and evaluation.")
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name: str, help_text: str, checkpoint: bool = False, many: bool = False):
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--config", help="TOML config file")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config value (repeatable), e.g. mode=pixel_only")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--data", help="dataset: synth:seed=7,count=2000[,size=32] or cifar:PATH")
        if checkpoint:
            sub.add_argument("--checkpoint", action="append" if many else "store",
                             required=True, help="checkpoint file" + (" (repeatable)" if many else ""))
            sub.add_argument("--feature", choices=FEATURE_KINDS, help="cls or mean_pool features")
        return sub

    add("pretrain", "Pretrain a model in the configured mode.")
    add("probe", "Linear-probe a frozen checkpoint on every configured task.", checkpoint=True)
    add("rankme", "Print the RankMe score of a checkpoint's features.", checkpoint=True)
    export = add("export", "Write a checkpoint's features as CSV.", checkpoint=True)
    export.add_argument("--reconstruct", type=int, default=0, metavar="N",
                        help="also save pixel reconstructions of the first N images as .npy")
    add("report", "Probe and score several checkpoints side by side.", checkpoint=True, many=True)
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config, args.overrides)
    if args.data:
        config = replace(config, data=parse_data_spec(args.data, config.data))
    if getattr(args, "feature", None):
        config = replace(config, probe=replace(config.probe, feature_kind=args.feature))
    return config.validate()


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_tasks(config: RunConfig, available) -> List[str]:
    tasks = [t for t in config.probe.tasks if t in available]
    if not tasks:
        raise ConfigMismatchError(
            f"none of the probe tasks {config.probe.tasks} are labelled in the dataset ({sorted(available)})"
        )
    return tasks


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #
def run_pretrain(args, config: RunConfig) -> int:
    out = _out_dir(args, f"runs/{config.model.mode}")
    _, metrics_path = pretrain(config, out)
    print(metrics_path)
    return EXIT_OK


def run_probe(args, config: RunConfig) -> int:
    out = _out_dir(args, "probes")
    save_resolved(config, out)
    matrix = extract_features(args.checkpoint, build_dataset(config.data), config.probe.feature_kind)
    rows = []
    for task in _eval_tasks(config, matrix.labels):
        result = linear_probe(matrix, matrix.labels[task], config.probe, task=task)
        rows.append({"task": task, "accuracy": result.accuracy, "best_epoch": result.best_epoch + 1,
                     "train_accuracy": result.train_accuracy})
        print(f"{task}\t{result.accuracy:.4f}")
    pd.DataFrame(rows).to_csv(out / "probe.csv", index=False)
    return EXIT_OK


def run_rankme(args, config: RunConfig) -> int:
    if args.out:
        save_resolved(config, _out_dir(args, "."))
    matrix = extract_features(args.checkpoint, build_dataset(config.data), config.probe.feature_kind)
    print(f"{rankme(matrix, config.probe.rankme_epsilon):.6f}")
    return EXIT_OK


def run_export(args, config: RunConfig) -> int:
    out = _out_dir(args, "exports")
    save_resolved(config, out)
    samples = build_dataset(config.data)
    model = load_model(args.checkpoint)
    matrix = extract_features(model, samples, config.probe.feature_kind)
    print(export_embeddings(matrix, out / "embeddings.csv"))

    if args.reconstruct > 0:
        if model.pixel_decoder is None:
            raise ConfigMismatchError(f"{model.config.mode} checkpoints have no pixel decoder")
        rng = np.random.default_rng(config.train.seed)
        images = [
            reconstruct(model, s.pixels, sample_mask(model.config.n_patches, model.config.mask_ratio, rng))
            for s in samples[:args.reconstruct]
        ]
        path = out / "reconstructions.npy"
        np.save(path, np.stack(images))
        print(path)
    return EXIT_OK


def run_report(args, config: RunConfig) -> int:
    if len(args.checkpoint) < 2:
        raise UsageError("report needs at least two --checkpoint arguments")
    out = _out_dir(args, "reports")
    save_resolved(config, out)
    samples = build_dataset(config.data)
    tasks = _eval_tasks(config, samples[0].labels)
    report = ablation_report(args.checkpoint, samples, tasks, config.probe, out_dir=out)
    print(format_report(report, tasks))
    return EXIT_OK


HANDLERS = {
    "pretrain": run_pretrain,
    "probe": run_probe,
    "rankme": run_rankme,
    "export": run_export,
    "report": run_report,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv``, run the subcommand and map failures to exit codes.

    Returns:
        0 on success, 1 on usage/configuration errors, 2 on runtime failures
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
            raise UnknownSubcommandError(
                f"unknown subcommand {argv[0]!r}; expected one of {', '.join(SUBCOMMANDS)}"
            )
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            # --help
            return int(exc.code or 0)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        settings = Settings()
        logger.setLevel(settings.log_level)
        torch.set_num_threads(settings.threads)
        config = _resolve_config(args)
        return HANDLERS[args.command](args, config)
    except (UsageError, ConfigValidationError, UnknownSubcommandError) as exc:
        logger.error(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PiLaMIMError, OSError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(dispatch(sys.argv[1:]))
