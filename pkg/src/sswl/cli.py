"""Command-line surface: simulate, train, evaluate, report, describe.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Error lines are
prefixed with "error:".
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import ContainerFormatError, describe as describe_container
from .dataio import MAGIC as SLICE_MAGIC
from .dataio import NormalizationSpec, SliceFormatError, read_slice
from .experiment import (
    DATA_ROOT_ENV,
    ConfigError,
    build_report,
    evaluate_checkpoint,
    load_spec,
    run_sweep,
    simulate_from_manifest,
    simulate_phantoms,
)
from .windowing import WindowSpec


class _CliValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad usage is a validation error (exit 1)
        raise _CliValidationError(message)


def _parse_size(text: str):
    return "full" if text == "full" else int(text)


def _parse_roi(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise _CliValidationError(f"--roi expects x,y,w,h, got {text!r}")
    try:
        x, y, w, h = (int(p) for p in parts)
    except ValueError as exc:
        raise _CliValidationError(f"--roi expects integers: {exc}") from exc
    return x, y, w, h


def _cmd_simulate(args) -> int:
    if (args.phantom is None) == (args.from_manifest is None):
        raise _CliValidationError("choose exactly one of --phantom or --from")
    if args.phantom is not None:
        out = args.out or os.environ.get(DATA_ROOT_ENV)
        if not out:
            raise _CliValidationError(f"--out is required (or set ${DATA_ROOT_ENV})")
        n_files, manifest_path = simulate_phantoms(
            Path(out), args.phantom, args.size, args.dose, args.seed, family=args.family
        )
        print(f"wrote {n_files} slice files ({args.phantom} pairs), manifest {manifest_path}")
        return 0
    if args.source_dose is None or args.target_dose is None:
        raise _CliValidationError("--from requires --source-dose and --target-dose")
    count = simulate_from_manifest(
        Path(args.from_manifest),
        args.source_dose,
        args.target_dose,
        noise_model=args.noise_model,
    )
    print(f"wrote {count} new low-dose slices at dose {args.target_dose}")
    return 0


def _cmd_train(args) -> int:
    spec = load_spec(Path(args.spec))
    sizes = [args.labeled_size] if args.labeled_size is not None else None
    done = run_sweep(
        spec,
        Path(args.out),
        pretext=args.pretext,
        labeled_sizes=sizes,
        force=args.force,
    )
    for directory in done:
        print(f"completed {directory}")
    return 0


def _cmd_evaluate(args) -> int:
    window = WindowSpec(center=args.window_center, width=args.window_width)
    roi = _parse_roi(args.roi) if args.roi else None
    mean = evaluate_checkpoint(
        Path(args.checkpoint) if args.checkpoint else None,
        Path(args.manifest),
        Path(args.out),
        window=window,
        norm=NormalizationSpec(hu_min=args.hu_min, hu_max=args.hu_max),
        dose=args.dose,
        roi=roi,
        identity=args.identity,
        batch_size=args.batch_size,
    )
    print(
        f"evaluated {mean.n_images} pairs: psnr={mean.psnr_db!r} ssim={mean.ssim!r} "
        f"mse={mean.mse!r} nrmse={mean.nrmse!r}"
    )
    print(f"wrote {Path(args.out) / 'metrics.csv'}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path(args.runs) / "report"
    report = build_report(Path(args.runs), out)
    print(f"aggregated {len(report.runs)} runs into {len(report.means)} table rows")
    print(f"wrote {out / 'report.csv'} and {out / 'significance.csv'}")
    return 0


def _cmd_describe(args) -> int:
    path = Path(args.path)
    with open(path, "rb") as fh:
        magic = fh.read(len(SLICE_MAGIC))
    if magic == SLICE_MAGIC:
        slc = read_slice(path)
        print(f"file: {path}")
        print("kind: ct_slice")
        print(f"dims: {slc.height}x{slc.width}")
        print(f"value range: [{float(slc.pixels.min())!r}, {float(slc.pixels.max())!r}]")
        return 0
    print(describe_container(path))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sswl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate phantom pairs or synthesize lower doses")
    p.add_argument("--phantom", type=int, help="number of phantom pairs to generate")
    p.add_argument("--from", dest="from_manifest", help="manifest to synthesize doses from")
    p.add_argument("--out", help=f"output dataset root (default ${DATA_ROOT_ENV})")
    p.add_argument("--size", type=int, default=64, help="phantom slice size (default 64)")
    p.add_argument("--dose", type=float, default=0.05, help="target dose fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", default="abdomen", choices=("abdomen", "chest"))
    p.add_argument("--source-dose", type=float, help="source dose for --from")
    p.add_argument("--target-dose", type=float, help="target dose for --from")
    p.add_argument(
        "--noise-model", default="excess_quanta", choices=("inverse_dose", "excess_quanta")
    )
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="run the (labeled_size, seed) sweep of a spec")
    p.add_argument("--spec", required=True, help="flat key = value spec file")
    p.add_argument("--pretext", help="override pretext kind")
    p.add_argument("--labeled-size", type=_parse_size, help="override labeled size")
    p.add_argument("--out", default="runs", help="run-directory root (default runs)")
    p.add_argument("--force", action="store_true", help="redo existing run directories")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint over a test manifest")
    p.add_argument("--checkpoint", help="checkpoint file (optional with --identity)")
    p.add_argument("--manifest", required=True, help="test manifest")
    p.add_argument("--out", default="evaluation", help="output directory")
    p.add_argument("--dose", type=float, help="select pairs at this low dose")
    p.add_argument("--window-center", type=float, default=40.0)
    p.add_argument("--window-width", type=float, default=300.0)
    p.add_argument("--hu-min", type=float, default=-1024.0, help="input normalization floor")
    p.add_argument("--hu-max", type=float, default=3071.0, help="input normalization ceiling")
    p.add_argument("--roi", help="x,y,w,h crop for per-ROI SSIM and image grids")
    p.add_argument("--identity", action="store_true", help="use targets as predictions")
    p.add_argument("--batch-size", type=int, default=10)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="aggregate run directories into tables and plots")
    p.add_argument("--runs", required=True, help="run-directory root")
    p.add_argument("--out", help="report directory (default <runs>/report)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("describe", help="print the manifest of a checkpoint or slice file")
    p.add_argument("path")
    p.set_defaults(func=_cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (_CliValidationError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, SliceFormatError, ContainerFormatError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
