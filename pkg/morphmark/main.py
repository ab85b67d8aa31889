"""Command line entry points of the two-stage one-shot landmark pipeline."""
import argparse
import os
import sys
from gettext import gettext as _
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from . import __version__, api
from .exceptions import MorphmarkError
from .format import PlainPrinter, create_terminal_printer, format_epoch, format_report
from .logo import ASCII_ART
from .presets import presets
from .settings import Config
from .synthbench import DEFAULT_THRESHOLDS

QUICK_GUIDE = f"""
{ASCII_ART}

Nothing to do: no command was given!

A typical run on synthetic data:

    `morphmark gen-data --out data`
    `morphmark train-stage1 --data data --out runs/stage1`
    `morphmark train-stage2 --data data --pseudo-labels runs/stage1/pseudo_labels.csv \\
        --out runs/stage2`
    `morphmark eval --data data --predictions runs/stage2/predictions.csv --out runs/eval`

`morphmark --help` lists every command, `morphmark <command> --help` its options.
"""

# Command flags that map onto dotted config keys.
CONFIG_FLAGS = {
    "size": "data.size",
    "count": "data.count",
    "landmarks": "data.landmarks",
    "warp": "data.warp",
    "noise": "data.noise",
    "exemplar": "data.exemplar_id",
    "stage1_epochs": "stage1.epochs",
    "stage2_epochs": "stage2.epochs",
    "seed": "seed",
    "threads": "threads",
    "preset": "preset",
    "verbose": "verbose",
    "quiet": "quiet",
    "color_output": "color_output",
}


def _add_common_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("general options")
    group.add_argument(
        "-h",
        "--help",
        action="help",
        default=argparse.SUPPRESS,
        help=_("show this help message and exit"),
    )
    group.add_argument("--seed", type=int, help="Seed of every random choice of the run.")
    group.add_argument(
        "--config",
        dest="settings_file",
        help="A JSON or TOML config file; a previous run's resolved_config.json reproduces it.",
    )
    group.add_argument(
        "--threads",
        type=int,
        help="Worker threads (default from MORPHMARK_THREADS, else 1). "
        "1 gives bit-reproducible runs.",
    )
    group.add_argument(
        "--preset",
        choices=sorted(presets),
        help="Base configuration to use for this run.",
    )
    group.add_argument(
        "--set",
        dest="overrides",
        action="append",
        metavar="KEY=VALUE",
        default=[],
        help="Overrides any dotted config key, e.g. --set stage2.epsilon_max=0.5.",
    )
    output = group.add_mutually_exclusive_group()
    output.add_argument(
        "-v", "--verbose", action="store_true", help="Prints a summary line per training epoch."
    )
    output.add_argument(
        "-q", "--quiet", action="store_true", help="Suppresses everything but errors."
    )
    group.add_argument(
        "--color",
        dest="color_output",
        action="store_true",
        help="Colors terminal output (requires colorama).",
    )


def _command(
    subparsers: Any, name: str, help_text: str, handler: Callable[..., Any]
) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(name, help=help_text, description=help_text, add_help=False)
    parser.set_defaults(handler=handler)
    _add_common_options(parser)
    return parser


def _build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphmark",
        description="One-shot landmark localization: registration from a single labeled "
        "exemplar, then co-teaching of two heatmap detectors on the resulting pseudo labels.",
        add_help=False,
    )
    parser.add_argument(
        "-h",
        "--help",
        action="help",
        default=argparse.SUPPRESS,
        help=_("show this help message and exit"),
    )
    parser.add_argument(
        "-V",
        "--version",
        action="store_true",
        dest="show_version",
        help="Displays the currently installed version of morphmark.",
    )
    parser.add_argument(
        "--vn",
        "--version-number",
        action="version",
        version=__version__,
        help="Returns just the current version number without the logo",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")

    gen_data = _command(subparsers, "gen-data", "Render a synthetic dataset.", _gen_data)
    gen_data.add_argument("--out", required=True, help="Output dataset directory.")
    gen_data.add_argument("--size", type=int, help="Image side length in pixels.")
    gen_data.add_argument("--count", type=int, help="Number of images.")
    gen_data.add_argument("--landmarks", type=int, help="Landmarks per image.")
    gen_data.add_argument("--warp", type=float, help="Warp strength in [0, 1].")
    gen_data.add_argument("--noise", type=float, help="Gaussian noise level.")

    train_stage1 = _command(
        subparsers, "train-stage1", "Train the registration stage.", _train_stage1
    )
    train_stage1.add_argument("--data", required=True, help="Dataset directory or manifest.")
    train_stage1.add_argument("--out", required=True, help="Output directory.")
    train_stage1.add_argument("--epochs", type=int, dest="stage1_epochs")
    train_stage1.add_argument("--exemplar", help="Overrides the manifest's exemplar id.")

    infer = _command(
        subparsers, "infer-pseudo", "Pseudo labels from a stage I checkpoint.", _infer_pseudo
    )
    infer.add_argument("--data", required=True, help="Dataset directory or manifest.")
    infer.add_argument("--checkpoint", required=True, help="A stage1.ckpt file.")
    infer.add_argument("--out", required=True, help="Output directory.")
    infer.add_argument("--exemplar", help="Overrides the manifest's exemplar id.")

    train_stage2 = _command(
        subparsers, "train-stage2", "Co-teach the detectors on pseudo labels.", _train_stage2
    )
    train_stage2.add_argument("--data", required=True, help="Dataset directory or manifest.")
    train_stage2.add_argument("--pseudo-labels", required=True, dest="pseudo_labels")
    train_stage2.add_argument("--out", required=True, help="Output directory.")
    train_stage2.add_argument("--epochs", type=int, dest="stage2_epochs")
    train_stage2.add_argument("--exemplar", help="Overrides the manifest's exemplar id.")

    evaluate = _command(subparsers, "eval", "Score predictions against the truth.", _eval)
    evaluate.add_argument("--data", required=True, help="Dataset directory or manifest.")
    evaluate.add_argument("--predictions", required=True, help="A predictions CSV.")
    evaluate.add_argument("--out", help="Directory receiving report.json.")
    evaluate.add_argument(
        "--thresholds",
        type=float,
        nargs="+",
        default=None,
        help="SDR thresholds (default 2 2.5 3 4).",
    )

    overlay = _command(subparsers, "overlay", "Draw landmarks over images.", _overlay)
    overlay.add_argument("--data", required=True, help="Dataset directory or manifest.")
    overlay.add_argument("--predictions", required=True, help="A predictions CSV.")
    overlay.add_argument("--out", required=True, help="Output directory.")
    overlay.add_argument("--ids", nargs="+", default=[], help="Image ids (default: all).")
    overlay.add_argument(
        "--no-truth", dest="hide_truth", action="store_true", help="Draw predictions only."
    )
    overlay.add_argument(
        "--checkpoint", help="A stage1.ckpt; also writes the exemplar's registrations."
    )
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_arg_parser()
    return {
        key: value
        for key, value in vars(parser.parse_args(argv)).items()
        if value is not None and value is not False and value != []
    }


def _parse_override(item: str) -> Dict[str, str]:
    key, separator, value = item.partition("=")
    if not separator or not key.strip():
        raise ValueError(f"--set expects KEY=VALUE, got '{item}'.")
    return {key.strip(): value.strip()}


def build_config(arguments: Dict[str, Any]) -> Config:
    overrides: Dict[str, Any] = {}
    for item in arguments.get("overrides", []):
        overrides.update(_parse_override(item))
    for flag, key in CONFIG_FLAGS.items():
        if flag in arguments:
            overrides[key] = arguments[flag]
    settings_file = arguments.get("settings_file", "")
    if settings_file:
        return Config(settings_file=os.path.abspath(settings_file), **overrides)
    return Config(settings_path=os.getcwd(), **overrides)


def _printer(config: Config) -> PlainPrinter:
    return create_terminal_printer(
        color=config.color_output, error=config.format_error, success=config.format_success
    )


def _epoch_echo(config: Config, printer: PlainPrinter, stage: str) -> Any:
    if not config.verbose:
        return None
    return lambda summary: printer.info(format_epoch(stage, summary))


def _finish(config: Config, printer: PlainPrinter, output_dir: Path, message: str) -> None:
    if not config.quiet:
        printer.success(f"{message}; resolved config: {output_dir / api.RESOLVED_CONFIG}")


def _gen_data(arguments: Dict[str, Any], config: Config, printer: PlainPrinter) -> None:
    out = Path(arguments["out"])
    dataset = api.generate_dataset(out, config)
    _finish(config, printer, out, f"generated {len(dataset)} images in {out}")


def _train_stage1(arguments: Dict[str, Any], config: Config, printer: PlainPrinter) -> None:
    out = Path(arguments["out"])
    result = api.run_stage1(
        arguments["data"], out, config, on_epoch=_epoch_echo(config, printer, "stage1")
    )
    _finish(
        config,
        printer,
        out,
        f"wrote {len(result.pseudo_labels)} pseudo labels to {out / api.PSEUDO_LABELS}",
    )


def _infer_pseudo(arguments: Dict[str, Any], config: Config, printer: PlainPrinter) -> None:
    out = Path(arguments["out"])
    labels = api.infer_pseudo_labels(arguments["data"], arguments["checkpoint"], out, config)
    _finish(config, printer, out, f"wrote {len(labels)} pseudo labels to {out / api.PSEUDO_LABELS}")


def _train_stage2(arguments: Dict[str, Any], config: Config, printer: PlainPrinter) -> None:
    out = Path(arguments["out"])
    result = api.run_stage2(
        arguments["data"],
        arguments["pseudo_labels"],
        out,
        config,
        on_epoch=_epoch_echo(config, printer, "stage2"),
    )
    _finish(
        config,
        printer,
        out,
        f"wrote {len(result.predictions)} predictions to {out / api.PREDICTIONS}",
    )


def _eval(arguments: Dict[str, Any], config: Config, printer: PlainPrinter) -> None:
    out = Path(arguments["out"]) if "out" in arguments else None
    thresholds = arguments.get("thresholds") or DEFAULT_THRESHOLDS
    report = api.evaluate_predictions(
        arguments["data"], arguments["predictions"], out, thresholds, config
    )
    if not config.quiet:
        printer.table(format_report(report))
    if out is not None:
        _finish(config, printer, out, f"wrote {out / api.REPORT}")
    else:
        api.write_resolved_config(config, Path.cwd())
        _finish(config, printer, Path("."), f"scored {report.count} images")


def _overlay(arguments: Dict[str, Any], config: Config, printer: PlainPrinter) -> None:
    out = Path(arguments["out"])
    written: List[Path] = api.render_overlays(
        arguments["data"],
        arguments["predictions"],
        out,
        arguments.get("ids", ()),
        not arguments.get("hide_truth", False),
        arguments.get("checkpoint"),
        config,
    )
    _finish(config, printer, out, f"wrote {len(written)} images to {out}")


def main(argv: Optional[Sequence[str]] = None) -> None:
    arguments = parse_args(argv)
    if arguments.get("show_version"):
        print(ASCII_ART)
        return
    if "command" not in arguments:
        print(QUICK_GUIDE)
        return

    fallback = create_terminal_printer(color=False)
    try:
        config = build_config(arguments)
    except (MorphmarkError, ValueError) as error:
        fallback.error(str(error))
        sys.exit(1)

    printer = _printer(config)
    try:
        arguments["handler"](arguments, config, printer)
    except (MorphmarkError, OSError, ValueError, ArithmeticError) as error:
        printer.error(" ".join(str(error).split()))
        sys.exit(1)


if __name__ == "__main__":
    main()
