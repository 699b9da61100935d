"""Command-line front end.

    segbalance profile <dataset_dir> [--out DIR] [--accuracy FILE] [--force]
    segbalance experiment --config FILE [--out DIR] [--parallel N] [--force]
    segbalance sweep --b 0,1,3,5 --acc-steps 100 [--out FILE] [--force]
    segbalance compare <reportA> <reportB> [--out FILE] [--freq CACHE] [--force]

Relative output paths are resolved under $SEGBALANCE_OUTPUT_ROOT when it is
set. Commands refuse to overwrite existing outputs unless --force is given;
with identical inputs and --force, reruns are byte-identical.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import dataio, stats
from .experiment import ConfigError, parse_config, run_experiment
from .metrics import _fmt, _fmt_pct, fp_tp_sweep, read_class_report_csv, write_class_report_csv
from .model import DivergenceError
from .synthdata import GenerationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

OUTPUT_ROOT_ENV = "SEGBALANCE_OUTPUT_ROOT"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _check_writable(path: str, force: bool) -> None:
    exists = os.path.isfile(path) or (os.path.isdir(path) and os.listdir(path))
    if exists and not force:
        raise CliError(f"{path} already exists; pass --force to overwrite", EXIT_CONFIG)


def _cmd_profile(args) -> int:
    out_dir = _resolve_out(args.out if args.out else args.dataset_dir)
    cache_path = os.path.join(out_dir, "frequency_cache.txt")
    summary_path = os.path.join(out_dir, "imbalance.json")
    if not args.force:
        for p in (cache_path, summary_path):
            if os.path.isfile(p):
                raise CliError(f"{p} already exists; pass --force to overwrite", EXIT_CONFIG)
    try:
        label_files = dataio.list_label_files(args.dataset_dir)
        if not label_files:
            raise CliError(f"{args.dataset_dir}: no images", EXIT_DATA)
        labels = [dataio.read_pgm(p) for p in label_files]
    except dataio.DataFormatError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    num_classes = 0
    for lab in labels:
        real = lab[lab != 65535]
        if real.size:
            num_classes = max(num_classes, int(real.max()) + 1)
    if num_classes == 0:
        raise CliError(f"{args.dataset_dir}: every pixel is ignored", EXIT_DATA)
    table = stats.profile(labels, num_classes)
    checksum = stats.file_list_checksum(
        os.path.relpath(p, args.dataset_dir) for p in label_files
    )

    summary: dict = {
        "num_images": table.num_images,
        "num_classes": num_classes,
        "pif": None,
        "rif": None,
        "pixel_max": None, "pixel_min": None,
        "region_max": None, "region_min": None,
        "notes": [],
    }
    try:
        imb = stats.imbalance(table)
        summary.update(pif=imb.pif, rif=imb.rif, pixel_max=imb.pixel_max,
                       pixel_min=imb.pixel_min, region_max=imb.region_max,
                       region_min=imb.region_min)
    except stats.ImbalanceError as exc:
        summary["notes"].append(f"imbalance undefined: {exc}")

    if args.accuracy:
        acc = _read_accuracy_file(args.accuracy, num_classes)
        summary["pearson"] = {}
        for domain, freq in (("pixel", table.pixel_freq), ("region", table.region_freq)):
            for mode, log in (("raw", False), ("log", True)):
                key = f"{domain}_{mode}"
                try:
                    summary["pearson"][key] = stats.accuracy_frequency_correlation(
                        acc, freq, log_freq=log
                    )
                except (stats.DegenerateInputError, ValueError) as exc:
                    summary["pearson"][key] = None
                    summary["notes"].append(f"pearson {key} undefined: {exc}")

    os.makedirs(out_dir, exist_ok=True)
    stats.save_frequency_cache(cache_path, table, checksum)
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _read_accuracy_file(path: str, num_classes: int) -> np.ndarray:
    acc = np.full(num_classes, np.nan)
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if len(parts) != 2:
                    raise CliError(f"{path}:{lineno}: expected 'class_id acc'", EXIT_DATA)
                acc[int(parts[0])] = float(parts[1])
    except OSError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    except (ValueError, IndexError):
        raise CliError(f"{path}: malformed accuracy file", EXIT_DATA) from None
    return acc


def _cmd_experiment(args) -> int:
    try:
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
    except OSError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from None
    out_dir = _resolve_out(args.out)
    _check_writable(out_dir, args.force)
    try:
        run_experiment(cfg, out_dir, parallel=args.parallel)
    except (GenerationError, DivergenceError) as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    print(f"experiment complete: {out_dir}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    try:
        b_values = [float(v) for v in args.b.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--b must be a comma list of reals, got {args.b!r}", EXIT_CONFIG) from None
    if args.acc_steps < 1:
        raise CliError("--acc-steps must be >= 1", EXIT_CONFIG)
    acc_grid = [(i + 1) / args.acc_steps for i in range(args.acc_steps)]
    try:
        rows = fp_tp_sweep(b_values, acc_grid)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    out = _resolve_out(args.out)
    _check_writable(out, args.force)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["b", "acc", "iou", "iou_pct"])
        for b, a, i in rows:
            w.writerow([_fmt(b), _fmt(a), _fmt(i), _fmt_pct(i)])
    print(f"wrote {len(rows)} rows: {out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        baseline = read_class_report_csv(args.report_a)
        rebalanced = read_class_report_csv(args.report_b)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read reports: {exc}", EXIT_DATA) from None
    pixel_freq = region_freq = None
    if args.freq:
        try:
            table, _ = stats.load_frequency_cache(args.freq)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read frequency cache: {exc}", EXIT_DATA) from None
        pixel_freq, region_freq = table.pixel_freq, table.region_freq
    out = _resolve_out(args.out)
    _check_writable(out, args.force)
    try:
        write_class_report_csv(out, rebalanced, pixel_freq=pixel_freq,
                               region_freq=region_freq, baseline=baseline)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    print(f"wrote comparison: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segbalance",
        description="Imbalance profiling, rebalance training experiments, and "
                    "metric diagnostics for semantic segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="profile a dataset directory")
    p.add_argument("dataset_dir")
    p.add_argument("--out", default=None, help="output directory (default: dataset dir)")
    p.add_argument("--accuracy", default=None,
                   help="per-class accuracy file ('class_id acc' lines) for correlations")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("experiment", help="train and compare rebalance variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="experiment_out")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("sweep", help="IoU-vs-Acc curves for fixed FP/TP ratios")
    p.add_argument("--b", default="0,1,3,5", help="comma list of FP/TP ratios")
    p.add_argument("--acc-steps", type=int, default=100, dest="acc_steps")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("compare", help="per-class deltas between two report CSVs")
    p.add_argument("report_a", help="baseline report CSV")
    p.add_argument("report_b", help="rebalanced report CSV")
    p.add_argument("--out", default="comparison.csv")
    p.add_argument("--freq", default=None, help="frequency cache for ordering")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
