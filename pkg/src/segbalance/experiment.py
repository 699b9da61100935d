"""Multi-seed comparison experiments over the loss variants.

One experiment generates a synthetic dataset per seed, trains each
configured run (the four named variants, or a region-rebalance lambda grid)
on the same data and split, and writes plot-ready CSVs:

    seed_<s>/train_frequency.txt      train-split frequency cache
    seed_<s>/report_<run>.csv         per-class metrics, deltas vs baseline
    seed_<s>/delta_vs_baseline.csv    combined per-run delta table
    seed_<s>/iou_condition_<run>.csv  accuracy-gain condition diagnostics
    summary.csv                       per-(seed, run) and cross-seed means

All output is deterministic: identical config and seeds reproduce
byte-identical files.
"""

from __future__ import annotations

import configparser
import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model, stats
from .losses import LossConfig
from .metrics import EvalReport, PremiseError, RebalanceScenario, iou_improvement_check
from .metrics import write_class_report_csv, _fmt, _fmt_pct
from .model import TrainConfig
from .synthdata import SceneSpec, generate

VARIANT_NAMES = ("baseline", "reweight", "balanced_pixel", "region_rebalance")
_VARIANT_TO_LOSS = {
    "baseline": "pixel_ce",
    "reweight": "reweight",
    "balanced_pixel": "balanced_pixel",
    "region_rebalance": "region_rebalance",
}

DEFAULT_CONFIG = """\
[experiment]
seeds = 0,1,2
mode = variants
variants = baseline,reweight,balanced_pixel,region_rebalance
tail_fraction = 0.3333

[scene]
num_classes = 12
height = 32
width = 32
num_images = 2000
head_tail_exponent = 1.0
target_pif = 100
target_rif = 15
feature_dim = 16
prototype_separation = 4.0
noise_scale = 2.0
region_noise_share = 0.3
confusable_pairs = 0:11:0.6, 1:10:0.6, 2:9:0.5

[train]
lr0 = 0.01
power = 0.9
total_iters = 600
batch_size = 8
weight_decay = 0.0001
momentum = 0.9
val_fraction = 0.2
d_hidden = 32
mean_filter = false

[loss]
lambda = 0.3
epsilon = 1e-12
ignore_label = 65535
"""


class ConfigError(ValueError):
    """Malformed or unknown experiment configuration."""


@dataclass
class ExperimentConfig:
    scene: SceneSpec
    train: TrainConfig
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    mode: str = "variants"
    variants: list[str] = field(default_factory=lambda: list(VARIANT_NAMES))
    lambda_grid: list[float] = field(default_factory=list)
    tail_fraction: float = 0.3333

    def runs(self) -> list[tuple[str, LossConfig]]:
        """(run name, loss config) pairs; the first run is the baseline."""
        base = self.train.loss
        if self.mode == "variants":
            names = list(self.variants)
            if "baseline" not in names:
                raise ConfigError("variants mode requires a baseline run")
            names.sort(key=lambda n: n != "baseline")  # baseline first, order kept
            return [(n, replace(base, variant=_VARIANT_TO_LOSS[n])) for n in names]
        if self.mode != "lambda_grid":
            raise ConfigError(f"unknown mode {self.mode!r}")
        grid = sorted(set(self.lambda_grid) | {0.0})
        return [
            (f"lambda_{v:g}", replace(base, variant="region_rebalance", lam=v)) for v in grid
        ]

    def tail_classes(self, pixel_freq: np.ndarray) -> np.ndarray:
        """Bottom tail_fraction of classes by train pixel frequency."""
        c = len(pixel_freq)
        n_tail = max(1, int(round(c * self.tail_fraction)))
        order = np.argsort(-np.asarray(pixel_freq), kind="stable")
        return order[c - n_tail :]


_SCHEMA = {
    "experiment": {"seeds", "mode", "variants", "lambda_grid", "tail_fraction"},
    "scene": {
        "num_classes", "height", "width", "num_images", "head_tail_exponent",
        "target_pif", "target_rif", "feature_dim", "prototype_separation",
        "noise_scale", "region_noise_share", "confusable_pairs",
    },
    "train": {
        "lr0", "power", "total_iters", "batch_size", "weight_decay", "momentum",
        "val_fraction", "d_hidden", "mean_filter",
    },
    "loss": {"lambda", "epsilon", "ignore_label"},
}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_pairs(text: str) -> list[tuple[int, int, float]]:
    pairs = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ConfigError(f"confusable pair {chunk!r} must be class:class:overlap")
        pairs.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return pairs


def _parse_list(text: str, conv) -> list:
    return [conv(c.strip()) for c in text.split(",") if c.strip()]


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat key=value config format, rejecting unknown keys."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config syntax: {exc}") from None
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        return _build_config(cp)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _get(cp, section, key, conv, default):
    if not cp.has_section(section) or key not in cp[section]:
        return default
    raw = cp[section][key]
    return conv(raw)


def _build_config(cp: configparser.ConfigParser) -> ExperimentConfig:
    size = (_get(cp, "scene", "height", int, 32), _get(cp, "scene", "width", int, 32))
    scene = SceneSpec(
        num_classes=_get(cp, "scene", "num_classes", int, 12),
        image_size=size,
        num_images=_get(cp, "scene", "num_images", int, 2000),
        head_tail_exponent=_get(cp, "scene", "head_tail_exponent", float, 1.0),
        target_pif=_get(cp, "scene", "target_pif", float, 100.0),
        target_rif=_get(cp, "scene", "target_rif", float, 15.0),
        feature_dim=_get(cp, "scene", "feature_dim", int, 16),
        prototype_separation=_get(cp, "scene", "prototype_separation", float, 4.0),
        confusable_pairs=_get(cp, "scene", "confusable_pairs", _parse_pairs, []),
        region_noise_share=_get(cp, "scene", "region_noise_share", float, 0.3),
        noise_scale=_get(cp, "scene", "noise_scale", float, None),
    )
    loss = LossConfig(
        lam=_get(cp, "loss", "lambda", float, 0.3),
        epsilon=_get(cp, "loss", "epsilon", float, 1e-12),
        ignore_label=_get(cp, "loss", "ignore_label", int, 65535),
    )
    train = TrainConfig(
        lr0=_get(cp, "train", "lr0", float, 1e-2),
        power=_get(cp, "train", "power", float, 0.9),
        total_iters=_get(cp, "train", "total_iters", int, 500),
        batch_size=_get(cp, "train", "batch_size", int, 8),
        weight_decay=_get(cp, "train", "weight_decay", float, 1e-4),
        momentum=_get(cp, "train", "momentum", float, 0.9),
        val_fraction=_get(cp, "train", "val_fraction", float, 0.2),
        d_hidden=_get(cp, "train", "d_hidden", int, 32),
        mean_filter=_get(cp, "train", "mean_filter", _parse_bool, False),
        loss=loss,
    )
    variants = _get(cp, "experiment", "variants", lambda t: _parse_list(t, str),
                    list(VARIANT_NAMES))
    for name in variants:
        if name not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {name!r}")
    return ExperimentConfig(
        scene=scene,
        train=train,
        seeds=_get(cp, "experiment", "seeds", lambda t: _parse_list(t, int), [0, 1, 2]),
        mode=_get(cp, "experiment", "mode", str, "variants"),
        variants=variants,
        lambda_grid=_get(cp, "experiment", "lambda_grid", lambda t: _parse_list(t, float), []),
        tail_fraction=_get(cp, "experiment", "tail_fraction", float, 0.3333),
    )


@dataclass
class RunOutcome:
    seed: int
    name: str
    report: EvalReport
    train_pixel_freq: np.ndarray
    train_region_freq: np.ndarray
    num_train_images: int


def _execute_run(cfg: ExperimentConfig, seed: int, name: str, loss: LossConfig,
                 dataset=None) -> RunOutcome:
    if dataset is None:
        dataset = generate(replace(cfg.scene, seed=seed))
    train_cfg = replace(cfg.train, seed=seed, loss=loss)
    result = model.train(dataset.features, dataset.labels, train_cfg)
    return RunOutcome(
        seed=seed,
        name=name,
        report=result.report,
        train_pixel_freq=result.train_table.pixel_freq,
        train_region_freq=result.train_table.region_freq,
        num_train_images=result.train_table.num_images,
    )


def _execute_run_task(args) -> RunOutcome:
    return _execute_run(*args)


def run_experiment(cfg: ExperimentConfig, out_dir, parallel: int = 1) -> dict:
    """Train every (seed, run) pair and write the result CSVs.

    Returns {(seed, name): RunOutcome} keyed results for programmatic use.
    """
    out_dir = os.fspath(out_dir)
    runs = cfg.runs()
    outcomes: dict[tuple[int, str], RunOutcome] = {}
    if parallel > 1:
        tasks = [(cfg, seed, name, loss) for seed in cfg.seeds for name, loss in runs]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for outcome in pool.map(_execute_run_task, tasks):
                outcomes[(outcome.seed, outcome.name)] = outcome
    else:
        for seed in cfg.seeds:
            dataset = generate(replace(cfg.scene, seed=seed))
            for name, loss in runs:
                outcomes[(seed, name)] = _execute_run(cfg, seed, name, loss, dataset)
    _write_outputs(cfg, out_dir, runs, outcomes)
    return outcomes


def _write_outputs(cfg, out_dir, runs, outcomes) -> None:
    os.makedirs(out_dir, exist_ok=True)
    base_name = runs[0][0]
    run_names = [name for name, _ in runs]
    for seed in cfg.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        base = outcomes[(seed, base_name)]
        table = stats.FrequencyTable(
            pixel_freq=base.train_pixel_freq,
            region_freq=base.train_region_freq,
            num_images=base.num_train_images,
        )
        stats.save_frequency_cache(os.path.join(seed_dir, "train_frequency.txt"), table)
        for name in run_names:
            out = outcomes[(seed, name)]
            write_class_report_csv(
                os.path.join(seed_dir, f"report_{name}.csv"),
                out.report,
                pixel_freq=base.train_pixel_freq,
                region_freq=base.train_region_freq,
                baseline=base.report if name != base_name else None,
            )
            if name != base_name:
                _write_condition_csv(
                    os.path.join(seed_dir, f"iou_condition_{name}.csv"),
                    base.report, out.report,
                    tail=cfg.tail_classes(base.train_pixel_freq),
                )
        _write_delta_csv(os.path.join(seed_dir, "delta_vs_baseline.csv"),
                         base, outcomes, seed, run_names)
    _write_summary(cfg, os.path.join(out_dir, "summary.csv"), run_names, outcomes)


def _write_delta_csv(path, base, outcomes, seed, run_names) -> None:
    order = np.argsort(-base.train_pixel_freq, kind="stable")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "class", "pixel_freq", "delta_iou", "delta_acc",
                    "delta_iou_pct", "delta_acc_pct"])
        for name in run_names:
            if name == base.name:
                continue
            rep = outcomes[(seed, name)].report
            d_iou = rep.per_class_iou - base.report.per_class_iou
            d_acc = rep.per_class_acc - base.report.per_class_acc
            for y in order:
                y = int(y)
                w.writerow([
                    name, y, int(base.train_pixel_freq[y]),
                    _fmt(d_iou[y]), _fmt(d_acc[y]),
                    _fmt_pct(d_iou[y]), _fmt_pct(d_acc[y]),
                ])


def condition_rows(baseline: EvalReport, rebalanced: EvalReport, tail) -> list[dict]:
    """Accuracy-gain condition diagnostics, one row per valid class."""
    tail = set(int(t) for t in np.asarray(tail))
    rows = []
    for y in range(baseline.num_classes):
        if not (baseline.valid_mask[y] and rebalanced.valid_mask[y]):
            continue
        b = baseline.class_counts(y)
        a = rebalanced.class_counts(y)
        row = {
            "class": y,
            "is_tail": y in tail,
            "n_y": b.tp + b.fn,
            "tp_before": b.tp, "fp_before": b.fp,
            "tp_after": a.tp, "fp_after": a.fp,
            "acc_before": baseline.per_class_acc[y],
            "acc_after": rebalanced.per_class_acc[y],
            "k_factor": None, "premise": "ok",
            "condition_holds": None, "iou_improved": None, "margin": None,
        }
        if b.tp == 0:
            row["premise"] = "zero_before_tp"
        else:
            k = row["acc_after"] / row["acc_before"] - 1.0
            row["k_factor"] = k
            if k < 0:
                row["premise"] = "acc_decreased"
            else:
                check = iou_improvement_check(RebalanceScenario(b, a, k))
                row["condition_holds"] = check.condition_holds
                row["iou_improved"] = check.iou_improved
                row["margin"] = check.margin
        rows.append(row)
    return rows


_CONDITION_FIELDS = [
    "class", "is_tail", "n_y", "tp_before", "fp_before", "tp_after", "fp_after",
    "acc_before", "acc_after", "k_factor", "premise",
    "condition_holds", "iou_improved", "margin",
    "acc_before_pct", "acc_after_pct",
]


def _write_condition_csv(path, baseline, rebalanced, tail) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_CONDITION_FIELDS)
        w.writeheader()
        for row in condition_rows(baseline, rebalanced, tail):
            out = dict(row)
            out["is_tail"] = str(row["is_tail"]).lower()
            out["acc_before_pct"] = _fmt_pct(row["acc_before"])
            out["acc_after_pct"] = _fmt_pct(row["acc_after"])
            out["acc_before"] = _fmt(row["acc_before"])
            out["acc_after"] = _fmt(row["acc_after"])
            for key in ("k_factor", "margin"):
                out[key] = _fmt(row[key]) if row[key] is not None else ""
            for key in ("condition_holds", "iou_improved"):
                out[key] = "" if row[key] is None else str(row[key]).lower()
            w.writerow(out)


def read_condition_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            rows.append({
                "class": int(raw["class"]),
                "is_tail": raw["is_tail"] == "true",
                "premise": raw["premise"],
                "k_factor": float(raw["k_factor"]) if raw["k_factor"] else None,
                "condition_holds": (None if raw["condition_holds"] == ""
                                    else raw["condition_holds"] == "true"),
                "iou_improved": (None if raw["iou_improved"] == ""
                                 else raw["iou_improved"] == "true"),
                "margin": float(raw["margin"]) if raw["margin"] else None,
            })
    return rows


_SUMMARY_FIELDS = [
    "seed", "run", "miou", "macc", "tail_miou", "tail_macc",
    "miou_pct", "macc_pct", "tail_miou_pct", "tail_macc_pct",
]


def _write_summary(cfg, path, run_names, outcomes) -> None:
    rows = []
    for seed in cfg.seeds:
        tail = cfg.tail_classes(outcomes[(seed, run_names[0])].train_pixel_freq)
        for name in run_names:
            rep = outcomes[(seed, name)].report
            t_iou, t_acc = rep.mean_over(tail)
            rows.append({"seed": str(seed), "run": name, "miou": rep.miou,
                         "macc": rep.macc, "tail_miou": t_iou, "tail_macc": t_acc})
    for name in run_names:
        mine = [r for r in rows if r["run"] == name and r["seed"] != "mean"]
        rows.append({
            "seed": "mean", "run": name,
            **{k: float(np.mean([r[k] for r in mine]))
               for k in ("miou", "macc", "tail_miou", "tail_macc")},
        })
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({
                "seed": r["seed"], "run": r["run"],
                "miou": _fmt(r["miou"]), "macc": _fmt(r["macc"]),
                "tail_miou": _fmt(r["tail_miou"]), "tail_macc": _fmt(r["tail_macc"]),
                "miou_pct": _fmt_pct(r["miou"]), "macc_pct": _fmt_pct(r["macc"]),
                "tail_miou_pct": _fmt_pct(r["tail_miou"]),
                "tail_macc_pct": _fmt_pct(r["tail_macc"]),
            })


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            rows.append({
                "seed": raw["seed"], "run": raw["run"],
                **{k: float(raw[k]) for k in ("miou", "macc", "tail_miou", "tail_macc")},
            })
    return rows
