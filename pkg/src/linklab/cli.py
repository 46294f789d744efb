"""Command-line entry point.

    linklab <train|eval|sweep|edit|gen-data> --config PATH [--seed N] [--out DIR] [...]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
All outputs go under the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
from pydantic import BaseModel, ValidationError

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, PartitionMismatchError, open_checkpoint
from .evaluation import (
    EmptyMaskError,
    InsufficientSamplesError,
    SweepError,
    ablation_sweep,
    evaluate,
    export_grid,
    export_link_heatmaps,
    format_sweep_table,
    masked_mse,
)
from .inversion import InversionDivergedError, invert, resample_links
from .linkreg import InvalidLinkError, InvalidPartitionError, mask_for
from .logging_utils import configure_logging
from .models import EditReportV1, ExperimentConfigV1
from .networks import Synthesizer
from .pipeline import Trainer, load_corpus
from .settings import RuntimeSettings
from .synthdata import EmptyImageDirectoryError, load_png, sample_corpus, save_png, write_corpus
from .training import TrainingDivergedError


LOGGER = logging.getLogger("linklab.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    """Bad command line or unreadable configuration."""


USAGE_ERRORS: tuple[type[BaseException], ...] = (
    UsageError,
    ValidationError,
    PartitionMismatchError,
    CheckpointError,
    InvalidLinkError,
    InvalidPartitionError,
    EmptyImageDirectoryError,
    FileNotFoundError,
)
RUNTIME_ERRORS: tuple[type[BaseException], ...] = (
    TrainingDivergedError,
    InversionDivergedError,
    SweepError,
    NonFiniteError,
    InsufficientSamplesError,
    EmptyMaskError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------
# Config and output helpers
# ---------------------------------------------------------------------


def load_config(path: Path, *, seed: int | None = None, out: Path | None = None) -> ExperimentConfigV1:
    """Read a JSON config, apply --seed/--out overrides, then validate."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise UsageError(f"config file not found: {path}") from err
    except OSError as err:
        raise UsageError(f"cannot read config file {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise UsageError(f"config file {path} is not valid JSON: {err}") from err
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    if seed is not None:
        payload["seed"] = seed
    if out is not None:
        payload["output_dir"] = str(out)
    return ExperimentConfigV1.model_validate(payload)


def write_json(path: Path, payload: BaseModel | dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.model_dump(mode="json", by_alias=True) if isinstance(payload, BaseModel) else payload
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _checkpoint_path(args: argparse.Namespace, config: ExperimentConfigV1) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(config.output_dir) / "final.lgl"


# ---------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------


def cmd_train(args: argparse.Namespace, config: ExperimentConfigV1, settings: RuntimeSettings) -> int:
    del settings
    _, state = open_checkpoint(Path(args.resume), config) if args.resume else (None, None)
    final = Trainer(config).run(state)
    print(f"trained {final.iteration} iterations -> {Path(config.output_dir) / 'final.lgl'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: ExperimentConfigV1, settings: RuntimeSettings) -> int:
    del settings
    checkpoint = _checkpoint_path(args, config)
    _, state = open_checkpoint(checkpoint, config)
    generator = Synthesizer.from_state(state.model, chunk_size=config.eval.chunk_size)
    real = None if args.no_quality else load_corpus(config)
    report = evaluate(config, generator, real_images=real, checkpoint=str(checkpoint))

    out_dir = Path(config.output_dir) / "eval"
    write_json(out_dir / "report.json", report)
    rng = np.random.default_rng(config.seed)
    for index, link in enumerate(config.links):
        export_link_heatmaps(
            generator,
            config.partition,
            link,
            rng,
            out_dir / "heatmaps",
            link_index=index,
            samples=config.eval.heatmap_samples,
        )
    print(f"MSE_i={report.mse_i_e3:.4f}e-3 MSE_o={report.mse_o_e3:.4f}e-3 -> {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: ExperimentConfigV1, settings: RuntimeSettings) -> int:
    table = ablation_sweep(config, args.dims, settings=settings)
    out_dir = Path(config.output_dir) / "sweep"
    write_json(out_dir / "sweep.json", table)
    text = format_sweep_table(table)
    (out_dir / "sweep.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_edit(args: argparse.Namespace, config: ExperimentConfigV1, settings: RuntimeSettings) -> int:
    del settings
    if not 0 <= args.link < len(config.links):
        raise InvalidLinkError(f"link id {args.link} outside 0..{len(config.links) - 1}")
    link = config.links[args.link]
    _, state = open_checkpoint(_checkpoint_path(args, config), config)
    generator = Synthesizer.from_state(state.model, chunk_size=config.eval.chunk_size)
    target = load_png(Path(args.image))

    rng = np.random.default_rng(config.seed)
    inv = config.inversion
    result = invert(
        generator,
        target,
        inv.steps,
        inv.lr,
        beta1=inv.beta1,
        beta2=inv.beta2,
        mean_samples=inv.mean_samples,
        rng=rng,
    )
    edited = generator.images(resample_links(result.w, [link], config.partition, rng))[0]
    masks = mask_for(link, result.reconstruction[None], config.data.segment_threshold).take(0)

    out_dir = Path(config.output_dir) / "edit"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(target, out_dir / "target.png")
    save_png(result.reconstruction, out_dir / "reconstruction.png")
    save_png(edited, out_dir / "edit.png")
    export_grid([target, result.reconstruction, edited], out_dir / "triptych.png", columns=3)
    report = EditReportV1(
        link_index=args.link,
        seed=config.seed,
        inversion=result.to_contract(),
        edit_in_mse_e3=masked_mse(edited, result.reconstruction, masks.m2) * 1e3,
        edit_out_mse_e3=masked_mse(edited, result.reconstruction, masks.m1) * 1e3,
        config_fingerprint=config.fingerprint(),
    )
    write_json(out_dir / "edit.json", report)
    print(f"reconstruction MSE={result.final_mse:.6f} -> {out_dir / 'triptych.png'}")
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace, config: ExperimentConfigV1, settings: RuntimeSettings) -> int:
    del settings
    count = config.data.corpus_size if args.count is None else args.count
    if count < 0:
        raise UsageError("--count must be >= 0")
    manifest = write_corpus(sample_corpus(config.seed, count), Path(config.output_dir) / "data")
    print(f"wrote {count} scenes -> {manifest}")
    return EXIT_OK


Command = Callable[[argparse.Namespace, ExperimentConfigV1, RuntimeSettings], int]

COMMANDS: dict[str, Command] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "edit": cmd_edit,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="linklab", description="LinkGAN desk-scale lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, type=Path, help="Experiment config JSON.")
        cmd.add_argument("--seed", type=int, help="Override the config seed.")
        cmd.add_argument("--out", type=Path, help="Override the config output_dir.")
        return cmd

    train = command("train", "Run two-phase LinkGAN training.")
    train.add_argument("--resume", help="Continue from an LGL1 checkpoint.")

    evaluate_cmd = command("eval", "Locality report, quality proxy and heatmaps.")
    evaluate_cmd.add_argument("--checkpoint", help="Defaults to <output_dir>/final.lgl.")
    evaluate_cmd.add_argument("--no-quality", action="store_true", help="Skip the quality proxy.")

    sweep = command("sweep", "Train and evaluate one model per linking dimensionality.")
    sweep.add_argument("--dims", type=int, nargs="+", default=[4, 8, 16, 32])

    edit = command("edit", "Invert an image and resample one link.")
    edit.add_argument("--checkpoint", help="Defaults to <output_dir>/final.lgl.")
    edit.add_argument("--image", required=True, help="PNG to invert.")
    edit.add_argument("--link", type=int, default=0, help="Index into the config's links.")

    gen = command("gen-data", "Write a synthetic PNG corpus and its factor manifest.")
    gen.add_argument("--count", type=int, help="Defaults to data.corpus_size.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        settings = RuntimeSettings.from_env()
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(settings.log_level)

    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        config = load_config(args.config, seed=args.seed, out=args.out)
        return COMMANDS[command](args, config, settings)
    except USAGE_ERRORS as err:
        return _fail(command, err, EXIT_USAGE)
    except RUNTIME_ERRORS as err:
        return _fail(command, err, EXIT_RUNTIME)
    except Exception as err:  # noqa: BLE001
        return _fail(command, err, EXIT_RUNTIME)


def _fail(command: str | None, err: BaseException, code: int) -> int:
    LOGGER.error(
        "cli_command_failed",
        extra={"command": command, "error_type": type(err).__name__, "exit_code": code},
    )
    message = str(err).splitlines()[0] if str(err) else type(err).__name__
    print(f"error: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
