"""``flowloss`` command line: train, eval, sweep, ablation, report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, parse_config


def _psi_list(text: str) -> list[float]:
    if not text.strip():
        return []
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--psi expects comma-separated numbers, got {text!r}") from None
    if any(not v > 0 for v in values):
        raise argparse.ArgumentTypeError(f"--psi values must be positive, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowloss", description="Noise-gated flow-loss training laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model; writes log.csv and ckpt_final.flc")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--dump-flow", action="store_true", help="write generated/reference flow fields as FLC1 files at each validation")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", type=Path, help="append the report as a CSV row to this file")

    p = sub.add_parser("sweep", help="baseline plus one gated run per psi; writes summary.csv")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--psi", type=_psi_list, default=[0.0625, 0.125, 0.25])
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("ablation", help="baseline vs wavg_ss vs wavg_ls; writes summary.csv")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("report", help="render figures for an existing run or comparison directory")
    p.add_argument("directory", type=Path)
    return parser


def _cmd_train(args) -> int:
    from .train import train

    cfg = parse_config(args.config)
    result = train(cfg, dump_flow=args.dump_flow, plots=not args.no_plots)
    print(f"wrote {result.output_dir / 'log.csv'} and {result.output_dir / 'ckpt_final.flc'} ({len(result.rows)} steps, {result.seconds:.1f} s)")
    if result.last_val is not None:
        print(_format_report(result.last_val))
    return 0


def _format_report(report) -> str:
    return "  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in asdict(report).items())


def _cmd_eval(args) -> int:
    from .train import evaluate

    cfg = parse_config(args.config)
    report = evaluate(args.checkpoint, args.split, cfg)
    print(_format_report(report))
    if args.out:
        row = {"checkpoint": str(args.checkpoint), "split": args.split, **asdict(report)}
        new = not args.out.exists()
        with open(args.out, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            if new:
                writer.writeheader()
            writer.writerow(row)
    return 0


def _print_summary(result) -> None:
    print(f"wrote {result.summary_path}")
    for name, run in result.runs.items():
        test = result.tests[name]
        print(f"  {name:<16} {run.seconds:8.1f} s  gate={run.gate_fraction:.3f}  test flow_consistency={test.flow_consistency:.4g}  jitter={test.jitter:.4g}")


def _cmd_sweep(args) -> int:
    from .train import sweep

    result = sweep(parse_config(args.config), args.psi, plots=not args.no_plots)
    _print_summary(result)
    return 0


def _cmd_ablation(args) -> int:
    from .train import ablation

    result = ablation(parse_config(args.config), plots=not args.no_plots)
    _print_summary(result)
    return 0


def _cmd_report(args) -> int:
    from . import report

    directory = args.directory
    written = []
    if (directory / "log.csv").is_file():
        written.append(report.plot_run(directory / "log.csv", directory / "curves.png"))
    if (directory / "summary.csv").is_file():
        written.append(report.plot_summary(directory / "summary.csv", directory / "summary.png"))
        logs = {p.parent.name: p for p in sorted(directory.glob("*/log.csv"))}
        if logs:
            written.append(report.plot_comparison(logs, directory / "comparison.png"))
    if not written:
        print(f"error: no log.csv or summary.csv in {directory}", file=sys.stderr)
        return 2
    for path in written:
        print(f"wrote {path}")
    return 0


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep, "ablation": _cmd_ablation, "report": _cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:  # TrainingDiverged
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
