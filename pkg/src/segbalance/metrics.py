"""Confusion-matrix segmentation metrics.

Everything downstream (per-class IoU/Acc, mean metrics, accuracy-gain
diagnostics) is derived from a single C x C count matrix, so evaluation can
be sharded over images and merged. The key relationships implemented here:

    IoU = TP / (TP + FN + FP)
    Acc = TP / (TP + FN)
    1/IoU = 1/Acc + FP/TP          (reciprocal identity, needs TP > 0)

and the accuracy-gain condition: if a class's Acc improves by a factor
(1 + K), its IoU improves if and only if

    FP_after - (1 + K) * FP_before <= K * n_y,

where n_y = TP + FN is the class's ground-truth pixel count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

# Labels are stored as 16-bit graymaps; the all-ones value marks ignored pixels.
IGNORE_LABEL = 65535


class ClassAbsentError(ValueError):
    """A metric was requested for a class with an empty denominator."""


class PremiseError(ValueError):
    """A rebalance scenario violates the accuracy-gain premise."""


@dataclass(frozen=True)
class ClassCounts:
    """True positives, false negatives, false positives for one class."""

    tp: int
    fn: int
    fp: int


def iou(c: ClassCounts) -> float:
    """Intersection-over-union TP/(TP+FN+FP) for one class."""
    denom = c.tp + c.fn + c.fp
    if denom == 0:
        raise ClassAbsentError("IoU undefined: tp + fn + fp == 0")
    return c.tp / denom


def acc(c: ClassCounts) -> float:
    """Class pixel accuracy TP/(TP+FN); requires the class in the ground truth."""
    denom = c.tp + c.fn
    if denom == 0:
        raise ClassAbsentError("Acc undefined: tp + fn == 0")
    return c.tp / denom


class ConfusionMatrix:
    """C x C integer count matrix: rows = ground truth, cols = prediction.

    Pixels whose ground-truth label equals ``ignore_label`` are counted in
    ``ignored_pixels`` and contribute to no cell. Accumulation over disjoint
    image shards followed by ``merge`` equals accumulation over the
    concatenated stream.
    """

    def __init__(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored_pixels = 0

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        """Add one (ground truth, prediction) label-map pair.

        Raises ValueError with the offending coordinate for shape mismatches
        and for labels outside [0, C) that are not the ignore label.
        """
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        c = self.num_classes
        gt_bad = (gt != self.ignore_label) & ((gt < 0) | (gt >= c))
        if gt_bad.any():
            at = tuple(int(v) for v in np.argwhere(gt_bad)[0])
            raise ValueError(f"ground-truth label {int(gt[at])} out of range at {at}")
        keep = gt != self.ignore_label
        pred_bad = keep & ((pred < 0) | (pred >= c))
        if pred_bad.any():
            at = tuple(int(v) for v in np.argwhere(pred_bad)[0])
            raise ValueError(f"predicted label {int(pred[at])} out of range at {at}")
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        self.ignored_pixels += int(gt.size - g.size)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Entrywise sum with another matrix over the same label space."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        self.counts += other.counts
        self.ignored_pixels += other.ignored_pixels
        return self

    def class_counts(self, y: int) -> ClassCounts:
        """TP, FN, FP for class ``y`` read off the count matrix."""
        if not 0 <= y < self.num_classes:
            raise IndexError(f"class index {y} out of range")
        tp = int(self.counts[y, y])
        fn = int(self.counts[y, :].sum()) - tp
        fp = int(self.counts[:, y].sum()) - tp
        return ClassCounts(tp=tp, fn=fn, fp=fp)

    def report(self) -> "EvalReport":
        """Per-class IoU/Acc plus means over classes present in the ground truth."""
        c = self.num_classes
        tp = np.diag(self.counts).astype(np.int64)
        fn = self.counts.sum(axis=1) - tp
        fp = self.counts.sum(axis=0) - tp
        valid = (tp + fn) > 0
        per_iou = np.full(c, np.nan)
        per_acc = np.full(c, np.nan)
        per_iou[valid] = tp[valid] / (tp + fn + fp)[valid]
        per_acc[valid] = tp[valid] / (tp + fn)[valid]
        if not valid.any():
            raise ClassAbsentError("no class present in the ground truth")
        return EvalReport(
            tp=tp,
            fn=fn,
            fp=fp,
            per_class_iou=per_iou,
            per_class_acc=per_acc,
            valid_mask=valid,
            miou=float(per_iou[valid].mean()),
            macc=float(per_acc[valid].mean()),
        )


@dataclass
class EvalReport:
    """Per-class IoU/Acc vectors and their means over valid classes.

    Entries for classes absent from the ground truth are NaN and excluded
    from ``miou``/``macc`` via ``valid_mask``.
    """

    tp: np.ndarray
    fn: np.ndarray
    fp: np.ndarray
    per_class_iou: np.ndarray
    per_class_acc: np.ndarray
    valid_mask: np.ndarray
    miou: float
    macc: float

    @property
    def num_classes(self) -> int:
        return len(self.per_class_iou)

    def class_counts(self, y: int) -> ClassCounts:
        return ClassCounts(tp=int(self.tp[y]), fn=int(self.fn[y]), fp=int(self.fp[y]))

    def mean_over(self, classes: np.ndarray) -> tuple[float, float]:
        """(mIoU, mAcc) restricted to the given class indices (valid ones only)."""
        sel = np.zeros(self.num_classes, dtype=bool)
        sel[np.asarray(classes, dtype=int)] = True
        sel &= self.valid_mask
        if not sel.any():
            raise ClassAbsentError("no valid class in the requested subset")
        return float(self.per_class_iou[sel].mean()), float(self.per_class_acc[sel].mean())


@dataclass(frozen=True)
class RebalanceScenario:
    """Before/after counts for one class under a rebalanced training run.

    ``k_factor`` is the relative accuracy gain: Acc_after = (1 + K) * Acc_before.
    """

    before: ClassCounts
    after: ClassCounts
    k_factor: float

    @classmethod
    def from_counts(cls, before: ClassCounts, after: ClassCounts) -> "RebalanceScenario":
        return cls(before=before, after=after, k_factor=acc(after) / acc(before) - 1.0)


@dataclass(frozen=True)
class ImprovementCheck:
    condition_holds: bool
    iou_improved: bool
    margin: float


def iou_improvement_check(s: RebalanceScenario, tol: float = 1e-9) -> ImprovementCheck:
    """Evaluate the accuracy-gain condition FP_after - (1+K)*FP_before <= K*n_y.

    The premise requires the same ground-truth pixel count before and after
    (the dataset is fixed), TP_before > 0 (the gain factor divides by the
    before accuracy), K >= 0, and Acc_after = (1+K) * Acc_before within
    ``tol`` relative. The condition and the IoU comparison are evaluated in
    exact rational arithmetic so the equivalence with an actual IoU
    improvement is free of rounding artifacts.
    """
    b, a = s.before, s.after
    n_y = b.tp + b.fn
    if n_y == 0 or b.tp == 0:
        raise PremiseError("before-counts must have tp > 0")
    if a.tp + a.fn != n_y:
        raise PremiseError(
            f"ground-truth pixel count changed: {n_y} before vs {a.tp + a.fn} after"
        )
    if s.k_factor < 0:
        raise PremiseError(f"k_factor must be >= 0, got {s.k_factor}")
    acc_before = b.tp / n_y
    acc_after = a.tp / n_y
    expected = (1.0 + s.k_factor) * acc_before
    if abs(acc_after - expected) > tol * max(acc_after, expected, 1e-300):
        raise PremiseError(
            f"after-Acc {acc_after} inconsistent with (1+K)*before-Acc {expected}"
        )
    # Counts fix the exact gain factor: (1+K) = tp_after / tp_before.
    k = Fraction(a.tp, b.tp) - 1
    lhs = a.fp - (1 + k) * b.fp
    rhs = k * n_y
    # IoU comparison by integer cross-multiplication: denominators are n_y + fp.
    improved = a.tp * (n_y + b.fp) >= b.tp * (n_y + a.fp)
    return ImprovementCheck(
        condition_holds=lhs <= rhs,
        iou_improved=improved,
        margin=float(rhs - lhs),
    )


@dataclass
class DeltaReport:
    """Per-class metric differences between two runs, rebalanced minus baseline."""

    delta_iou: np.ndarray
    delta_acc: np.ndarray
    # Class indices in presentation order (descending pixel frequency when a
    # frequency table was supplied, ascending index otherwise).
    order: np.ndarray


def delta_report(baseline: EvalReport, rebalanced: EvalReport, pixel_freq=None) -> DeltaReport:
    """Elementwise IoU/Acc differences, optionally ordered by pixel frequency."""
    if baseline.num_classes != rebalanced.num_classes:
        raise ValueError("reports have different class counts")
    if not np.array_equal(baseline.valid_mask, rebalanced.valid_mask):
        raise ValueError("reports have different valid-class masks")
    d_iou = rebalanced.per_class_iou - baseline.per_class_iou
    d_acc = rebalanced.per_class_acc - baseline.per_class_acc
    if pixel_freq is not None:
        freq = np.asarray(pixel_freq)
        if len(freq) != baseline.num_classes:
            raise ValueError("pixel_freq length does not match class count")
        # Stable sort keeps index order among equal frequencies.
        order = np.argsort(-freq, kind="stable")
    else:
        order = np.arange(baseline.num_classes)
    return DeltaReport(delta_iou=d_iou, delta_acc=d_acc, order=order)


def fp_tp_sweep(b_values, acc_grid) -> list[tuple[float, float, float]]:
    """IoU as a function of Acc for fixed FP/TP ratios b: IoU = 1/(1/Acc + b).

    Returns (b, acc, iou) rows, b-major, ready for CSV emission.
    """
    rows = []
    for b in b_values:
        if b < 0:
            raise ValueError(f"b must be >= 0, got {b}")
        for a in acc_grid:
            if not 0.0 < a <= 1.0:
                raise ValueError(f"acc must lie in (0, 1], got {a}")
            rows.append((float(b), float(a), 1.0 / (1.0 / a + b)))
    return rows


# --- CSV report format -----------------------------------------------------
#
# One row per class. Fractions are written with 17 significant digits for
# round-tripping, each with a twin percentage column rounded to two decimals
# for table-style reading. Missing values (absent class, no baseline) are
# empty fields.

REPORT_FIELDS = [
    "index",
    "name",
    "pixel_freq",
    "region_freq",
    "tp",
    "fn",
    "fp",
    "iou",
    "acc",
    "delta_iou",
    "delta_acc",
    "iou_pct",
    "acc_pct",
    "delta_iou_pct",
    "delta_acc_pct",
]


def _fmt(x: float | None) -> str:
    return "" if x is None or np.isnan(x) else format(float(x), ".17g")


def _fmt_pct(x: float | None) -> str:
    return "" if x is None or np.isnan(x) else format(100.0 * float(x), ".2f")


def write_class_report_csv(
    path,
    report: EvalReport,
    names=None,
    pixel_freq=None,
    region_freq=None,
    baseline: EvalReport | None = None,
) -> None:
    """Write the per-class report; delta columns are filled when a baseline is given."""
    delta = delta_report(baseline, report, pixel_freq) if baseline is not None else None
    order = delta.order if delta is not None else (
        np.argsort(-np.asarray(pixel_freq), kind="stable")
        if pixel_freq is not None
        else np.arange(report.num_classes)
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for y in order:
            y = int(y)
            d_iou = delta.delta_iou[y] if delta is not None else None
            d_acc = delta.delta_acc[y] if delta is not None else None
            w.writerow(
                [
                    y,
                    names[y] if names is not None else "",
                    int(pixel_freq[y]) if pixel_freq is not None else "",
                    int(region_freq[y]) if region_freq is not None else "",
                    int(report.tp[y]),
                    int(report.fn[y]),
                    int(report.fp[y]),
                    _fmt(report.per_class_iou[y]),
                    _fmt(report.per_class_acc[y]),
                    _fmt(d_iou),
                    _fmt(d_acc),
                    _fmt_pct(report.per_class_iou[y]),
                    _fmt_pct(report.per_class_acc[y]),
                    _fmt_pct(d_iou),
                    _fmt_pct(d_acc),
                ]
            )


def read_class_report_csv(path) -> EvalReport:
    """Reconstruct an EvalReport from a CSV written by ``write_class_report_csv``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty report: {path}")
    c = max(int(r["index"]) for r in rows) + 1
    tp = np.zeros(c, dtype=np.int64)
    fn = np.zeros(c, dtype=np.int64)
    fp = np.zeros(c, dtype=np.int64)
    per_iou = np.full(c, np.nan)
    per_acc = np.full(c, np.nan)
    for r in rows:
        y = int(r["index"])
        tp[y], fn[y], fp[y] = int(r["tp"]), int(r["fn"]), int(r["fp"])
        if r["iou"]:
            per_iou[y] = float(r["iou"])
        if r["acc"]:
            per_acc[y] = float(r["acc"])
    valid = (tp + fn) > 0
    return EvalReport(
        tp=tp,
        fn=fn,
        fp=fp,
        per_class_iou=per_iou,
        per_class_acc=per_acc,
        valid_mask=valid,
        miou=float(per_iou[valid].mean()),
        macc=float(per_acc[valid].mean()),
    )
