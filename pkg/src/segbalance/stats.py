"""Dataset-level imbalance profiling.

Two frequency domains are tracked per class: pixel frequency (total pixel
count over the training set) and region frequency (number of images in which
the class appears; a region is the set of all pixels of one class within one
image, not a connected component). The imbalance factor of a domain is
N_max / N_min over classes with nonzero counts.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .metrics import IGNORE_LABEL


class ImbalanceError(ValueError):
    """Imbalance factor requested for a domain with too few populated classes."""


class DegenerateInputError(ValueError):
    """Correlation requested for a constant (zero-variance) input."""


@dataclass
class FrequencyTable:
    """Per-class pixel and region counts over a set of label maps."""

    pixel_freq: np.ndarray
    region_freq: np.ndarray
    num_images: int

    @property
    def num_classes(self) -> int:
        return len(self.pixel_freq)

    def merge(self, other: "FrequencyTable") -> "FrequencyTable":
        """Elementwise sum; valid for disjoint image shards."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge tables with different class counts")
        self.pixel_freq = self.pixel_freq + other.pixel_freq
        self.region_freq = self.region_freq + other.region_freq
        self.num_images += other.num_images
        return self

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FrequencyTable)
            and self.num_images == other.num_images
            and np.array_equal(self.pixel_freq, other.pixel_freq)
            and np.array_equal(self.region_freq, other.region_freq)
        )


@dataclass(frozen=True)
class ImbalanceSummary:
    """Max/min frequency ratios per domain, over populated classes."""

    pif: float
    rif: float
    pixel_max: int
    pixel_min: int
    region_max: int
    region_min: int


def profile(
    dataset, num_classes: int, ignore_label: int = IGNORE_LABEL
) -> FrequencyTable:
    """Count per-class pixels and per-image class occurrences over label maps."""
    pixel = np.zeros(num_classes, dtype=np.int64)
    region = np.zeros(num_classes, dtype=np.int64)
    n = 0
    for labels in dataset:
        labels = np.asarray(labels)
        flat = labels[labels != ignore_label]
        bad = (flat < 0) | (flat >= num_classes)
        if bad.any():
            raise ValueError(f"label {int(flat[bad][0])} out of range [0, {num_classes})")
        counts = np.bincount(flat.astype(np.int64), minlength=num_classes)
        pixel += counts
        region += counts > 0
        n += 1
    return FrequencyTable(pixel_freq=pixel, region_freq=region, num_images=n)


def _domain_ratio(freq: np.ndarray, name: str, allow_single: bool) -> tuple[float, int, int]:
    populated = freq[freq > 0]
    if populated.size == 0 or (populated.size == 1 and not allow_single):
        raise ImbalanceError(
            f"{name} imbalance needs at least two populated classes, have {populated.size}"
        )
    hi = int(populated.max())
    lo = int(populated.min())
    return hi / lo, hi, lo


def imbalance(t: FrequencyTable, allow_single: bool = False) -> ImbalanceSummary:
    """Pixel and region imbalance factors N_max/N_min over populated classes.

    With ``allow_single`` a domain populated by exactly one class reports a
    trivial ratio of 1 instead of raising (the generator uses this for its
    realized summaries); the default is strict.
    """
    pif, p_hi, p_lo = _domain_ratio(t.pixel_freq, "pixel", allow_single)
    rif, r_hi, r_lo = _domain_ratio(t.region_freq, "region", allow_single)
    return ImbalanceSummary(
        pif=pif, rif=rif, pixel_max=p_hi, pixel_min=p_lo, region_max=r_hi, region_min=r_lo
    )


def pearson(x, y) -> float:
    """Pearson correlation Cov(x, y) / (sigma(x) * sigma(y)) in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d vectors of equal length")
    if x.size < 2:
        raise ValueError("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("correlation undefined for constant input")
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))


def accuracy_frequency_correlation(per_class_acc, freq, log_freq: bool = False) -> float:
    """Correlate class accuracy with (optionally log-transformed) class frequency.

    Classes with zero frequency or undefined accuracy are dropped from both
    vectors before correlating.
    """
    a = np.asarray(per_class_acc, dtype=np.float64)
    f = np.asarray(freq, dtype=np.float64)
    keep = (f > 0) & ~np.isnan(a)
    a, f = a[keep], f[keep]
    return pearson(a, np.log(f) if log_freq else f)


# --- frequency cache file ----------------------------------------------------
#
# Plain text, one line per class: "class_id pixel_count region_count", after a
# header line "num_images=<n> checksum=<hex>". The checksum fingerprints the
# dataset file list the counts were computed from ("-" when unknown).


def file_list_checksum(names) -> str:
    """SHA-256 over the sorted, newline-joined file names."""
    blob = "\n".join(sorted(str(n) for n in names)).encode()
    return hashlib.sha256(blob).hexdigest()


def save_frequency_cache(path, table: FrequencyTable, checksum: str = "-") -> None:
    with open(path, "w") as fh:
        fh.write(f"num_images={table.num_images} checksum={checksum}\n")
        for i in range(table.num_classes):
            fh.write(f"{i} {int(table.pixel_freq[i])} {int(table.region_freq[i])}\n")


def load_frequency_cache(path) -> tuple[FrequencyTable, str]:
    with open(path) as fh:
        header = fh.readline().strip()
        fields = dict(part.split("=", 1) for part in header.split())
        num_images = int(fields["num_images"])
        checksum = fields["checksum"]
        pixel, region = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'class pixel region'")
            idx, p, r = (int(v) for v in parts)
            if idx != len(pixel):
                raise ValueError(f"{path}:{lineno}: class ids must be consecutive")
            pixel.append(p)
            region.append(r)
    table = FrequencyTable(
        pixel_freq=np.array(pixel, dtype=np.int64),
        region_freq=np.array(region, dtype=np.int64),
        num_images=num_images,
    )
    return table, checksum
