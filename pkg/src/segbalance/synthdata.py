"""Deterministic long-tailed synthetic segmentation scenes.

Each image is a stack of axis-aligned class rectangles over an ignored
background; later-placed rectangles occlude earlier ones and labels follow
the top rectangle. Rectangles are placed head-first (descending area), so a
single later rectangle can never fully erase an earlier one.

Class frequencies follow a two-knob profile: with rank weight
q_i = (i / (C-1)) ** head_tail_exponent, class i appears in
num_images * target_rif ** -q_i images and its rectangle area scales with
(target_pif / target_rif) ** -q_i, so the head/tail ratios land on the
requested region and pixel imbalance factors. The generator measures the
realized ratios on the rendered maps and retries with a corrected area
budget until both are within 10 percent of target.

Pixel features are built to make pixels harder to classify than regions:

    feature = base(class) + share * region_noise + (1 - share) * pixel_noise

where region_noise is drawn once per (image, class) region, so pixels inside
one region are correlated (identical at share = 1). A confusable pair
(a, b, overlap) pulls the bases of both classes toward their common midpoint
by overlap/2, which shrinks the separation of the class means by a factor
(1 - overlap) while leaving them distinct for any overlap < 1: locally
similar textures, still distinguishable at region level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import IGNORE_LABEL
from .stats import FrequencyTable, ImbalanceSummary, imbalance


class GenerationError(RuntimeError):
    """The scene spec could not be satisfied within the retry budget."""


@dataclass
class SceneSpec:
    num_classes: int = 12
    image_size: tuple[int, int] = (32, 32)
    num_images: int = 2000
    head_tail_exponent: float = 1.0
    target_pif: float = 100.0
    target_rif: float = 15.0
    feature_dim: int = 16
    prototype_separation: float = 4.0
    confusable_pairs: list = field(default_factory=list)
    region_noise_share: float = 0.3
    seed: int = 0
    # Spherical noise scale; defaults to half the prototype separation.
    noise_scale: float | None = None
    max_retries: int = 8
    ratio_tolerance: float = 0.10

    def __post_init__(self):
        if not 1 <= self.num_classes < IGNORE_LABEL:
            raise ValueError("num_classes must be in [1, 65535)")
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        if self.target_pif < 1 or self.target_rif < 1:
            raise ValueError("imbalance targets must be >= 1")
        if not 0.0 <= self.region_noise_share <= 1.0:
            raise ValueError("region_noise_share must lie in [0, 1]")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.noise_scale is None:
            self.noise_scale = 0.5 * self.prototype_separation
        seen = set()
        for a, b, ov in self.confusable_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes) or a == b:
                raise ValueError(f"bad confusable pair ({a}, {b})")
            if not 0.0 <= ov <= 1.0:
                raise ValueError(f"pair overlap {ov} outside [0, 1]")
            if a in seen or b in seen:
                raise ValueError("a class may appear in at most one confusable pair")
            seen.update((a, b))


@dataclass
class GeneratedDataset:
    features: list
    labels: list
    table: FrequencyTable
    summary: ImbalanceSummary
    prototypes: np.ndarray
    spec: SceneSpec


def _rank_weights(spec: SceneSpec) -> np.ndarray:
    c = spec.num_classes
    if c == 1:
        return np.zeros(1)
    return (np.arange(c) / (c - 1)) ** spec.head_tail_exponent


def _prototypes(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    c, d = spec.num_classes, spec.feature_dim
    scale = spec.prototype_separation / np.sqrt(2.0)
    if d >= c:
        protos = np.zeros((c, d))
        protos[np.arange(c), np.arange(c)] = scale
        return protos
    # Too few dimensions for an orthogonal layout; random directions give
    # approximately the requested separation.
    v = rng.standard_normal((c, d))
    return scale * v / np.linalg.norm(v, axis=1, keepdims=True)


def _class_bases(spec: SceneSpec, protos: np.ndarray) -> np.ndarray:
    bases = protos.copy()
    for a, b, ov in spec.confusable_pairs:
        mid = 0.5 * (protos[a] + protos[b])
        bases[a] = (1.0 - ov) * protos[a] + ov * mid
        bases[b] = (1.0 - ov) * protos[b] + ov * mid
    return bases


def _rect_dims(area: float, h: int, w: int) -> tuple[int, int]:
    rw = int(np.clip(round(np.sqrt(area)), 1, w))
    rh = int(np.clip(round(area / rw), 1, h))
    return rh, rw


def _plan(spec: SceneSpec, area_head: float):
    """Per-class image memberships and rectangle dims for one attempt."""
    h, w = spec.image_size
    q = _rank_weights(spec)
    region_counts = np.maximum(1, np.rint(spec.num_images * spec.target_rif ** -q)).astype(int)
    region_counts = np.minimum(region_counts, spec.num_images)
    areas = area_head * (spec.target_pif / spec.target_rif) ** -q
    dims = [_rect_dims(a, h, w) for a in areas]
    for (rh, rw), a in zip(dims, areas):
        if rh * rw < 1 or rh > h or rw > w:
            raise GenerationError(f"rectangle of area {a:.1f} does not fit in {h}x{w}")
    return region_counts, dims


def _render(spec: SceneSpec, attempt: int, region_counts, dims, bases):
    h, w = spec.image_size
    c, d = spec.num_classes, spec.feature_dim
    plan_rng = np.random.default_rng([spec.seed, attempt, 1])
    members_of = [
        plan_rng.choice(spec.num_images, size=int(n), replace=False) for n in region_counts
    ]
    classes_in: list[list[int]] = [[] for _ in range(spec.num_images)]
    for cls, imgs in enumerate(members_of):
        for i in imgs:
            classes_in[i].append(cls)
    # Head-first paint order: descending rectangle area, class index breaking ties.
    order_key = {cls: (-dims[cls][0] * dims[cls][1], cls) for cls in range(c)}

    labels, features = [], []
    pixel = np.zeros(c, dtype=np.int64)
    region = np.zeros(c, dtype=np.int64)
    share = spec.region_noise_share
    for i in range(spec.num_images):
        rng = np.random.default_rng([spec.seed, attempt, 2, i])
        lab = np.full((h, w), IGNORE_LABEL, dtype=np.uint16)
        for cls in sorted(classes_in[i], key=order_key.__getitem__):
            rh, rw = dims[cls]
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            lab[y0 : y0 + rh, x0 : x0 + rw] = cls
        feat = np.zeros((h, w, d), dtype=np.float64)
        present, counts = np.unique(lab[lab != IGNORE_LABEL], return_counts=True)
        for cls, n_px in zip(present, counts):
            mask = lab == cls
            region_noise = rng.standard_normal(d) * spec.noise_scale
            pixel_noise = rng.standard_normal((int(n_px), d)) * spec.noise_scale
            feat[mask] = bases[cls] + share * region_noise + (1.0 - share) * pixel_noise
            pixel[cls] += int(n_px)
            region[cls] += 1
        bg = lab == IGNORE_LABEL
        if bg.any():
            feat[bg] = rng.standard_normal((int(bg.sum()), d)) * spec.noise_scale
        labels.append(lab)
        features.append(feat.astype(np.float32))
    table = FrequencyTable(pixel_freq=pixel, region_freq=region, num_images=spec.num_images)
    return labels, features, table


def generate(spec: SceneSpec) -> GeneratedDataset:
    """Render the dataset; deterministic in (spec, seed), including retries."""
    h, w = spec.image_size
    base_tail_area = max(4.0, 0.004 * h * w)
    area_head = base_tail_area * spec.target_pif / spec.target_rif
    protos = _prototypes(spec, np.random.default_rng([spec.seed, 0, 0]))
    bases = _class_bases(spec, protos)
    tol = spec.ratio_tolerance
    last = None
    for attempt in range(spec.max_retries):
        region_counts, dims = _plan(spec, area_head)
        labels, features, table = _render(spec, attempt, region_counts, dims, bases)
        summary = imbalance(table, allow_single=True)
        pif_ok = abs(summary.pif - spec.target_pif) <= tol * spec.target_pif
        rif_ok = abs(summary.rif - spec.target_rif) <= tol * spec.target_rif
        if pif_ok and rif_ok:
            return GeneratedDataset(
                features=features,
                labels=labels,
                table=table,
                summary=summary,
                prototypes=protos,
                spec=spec,
            )
        # Correct the pixel budget toward the target and try again.
        area_head *= spec.target_pif / summary.pif
        last = summary
    raise GenerationError(
        f"could not hit pif={spec.target_pif} rif={spec.target_rif} within "
        f"{spec.max_retries} attempts (last realized pif={last.pif:.1f} rif={last.rif:.1f})"
    )
