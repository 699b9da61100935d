"""Differentiable loss engine with analytic gradients, numpy only.

Four training objectives share one softmax core:

  * plain pixel cross-entropy,
  * re-weighted cross-entropy (per-class weights, typically 1/n_y),
  * prior-shifted ("balanced") softmax cross-entropy,
        loss_i = -log( p_y * e^{z_y} / sum_k p_k * e^{z_k} ),
    implemented exactly as cross-entropy on logits shifted by log(p_k),
  * the region objective: pixel features of one class within one image are
    averaged into a region feature, classified by a separate linear head,
    and penalized with the prior-shifted form using region frequencies as
    priors; the combined objective is L_pixel + lambda * L_region.

Every forward returns the matching analytic gradient; log-sum-exp is
computed with max subtraction throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import IGNORE_LABEL

VARIANTS = ("pixel_ce", "reweight", "balanced_pixel", "region_rebalance")


@dataclass
class LossConfig:
    """Loss variant selection and its shared numeric knobs.

    ``lam`` scales the region branch in the combined objective; ``priors``
    are per-class pixel counts (for the balanced pixel variants) or region
    frequencies (for the region branch) and must be positive for every class
    that can appear as a target. ``epsilon`` floors priors before logs.
    """

    variant: str = "pixel_ce"
    lam: float = 0.3
    priors: np.ndarray | None = None
    ignore_label: int = IGNORE_LABEL
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}, expected one of {VARIANTS}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _validate_targets(targets: np.ndarray, num_classes: int, ignore_label: int) -> np.ndarray:
    valid = targets != ignore_label
    bad = valid & ((targets < 0) | (targets >= num_classes))
    if bad.any():
        raise ValueError(f"target {int(targets[bad][0])} out of range [0, {num_classes})")
    if not valid.any():
        raise ValueError("all targets ignored")
    return valid


def softmax_ce(
    logits: np.ndarray, targets: np.ndarray, ignore_label: int = IGNORE_LABEL
) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax over non-ignored entries.

    Returns (loss, grad) with grad = (softmax - onehot) / n_valid on
    contributing rows and zeros on ignored rows.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    n, c = logits.shape
    valid = _validate_targets(targets, c, ignore_label)
    idx = np.flatnonzero(valid)
    t = targets[idx].astype(np.int64)
    ls = _log_softmax(logits[idx])
    loss = float(-ls[np.arange(len(idx)), t].mean())
    grad = np.zeros_like(logits)
    g = np.exp(ls)
    g[np.arange(len(idx)), t] -= 1.0
    grad[idx] = g / len(idx)
    return loss, grad


def balanced_softmax_ce(
    logits: np.ndarray,
    targets: np.ndarray,
    priors,
    ignore_label: int = IGNORE_LABEL,
    epsilon: float = 1e-12,
) -> tuple[float, np.ndarray]:
    """Prior-shifted cross-entropy: softmax_ce on logits + log(priors).

    The shift is constant per class, so the gradient with respect to the
    logits is unchanged in form. Priors must be strictly positive.
    """
    priors = np.asarray(priors, dtype=np.float64)
    if (priors <= 0).any():
        raise ValueError("priors must be strictly positive")
    shifted = np.asarray(logits, dtype=np.float64) + np.log(np.maximum(priors, epsilon))
    return softmax_ce(shifted, targets, ignore_label=ignore_label)


def reweighted_ce(
    logits: np.ndarray,
    targets: np.ndarray,
    weights,
    ignore_label: int = IGNORE_LABEL,
) -> tuple[float, np.ndarray]:
    """Cross-entropy with per-class weights, normalized by the applied weight sum.

    loss = sum_i w[t_i] * ce_i / sum_i w[t_i].
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("weights must be strictly positive")
    n, c = logits.shape
    valid = _validate_targets(targets, c, ignore_label)
    idx = np.flatnonzero(valid)
    t = targets[idx].astype(np.int64)
    w = weights[t]
    wsum = w.sum()
    ls = _log_softmax(logits[idx])
    loss = float((w * -ls[np.arange(len(idx)), t]).sum() / wsum)
    grad = np.zeros_like(logits)
    g = np.exp(ls)
    g[np.arange(len(idx)), t] -= 1.0
    grad[idx] = g * (w / wsum)[:, None]
    return loss, grad


def inverse_frequency_weights(pixel_freq) -> np.ndarray:
    """Per-class weights 1/n_y, renormalized to mean 1."""
    n = np.asarray(pixel_freq, dtype=np.float64)
    if (n <= 0).any():
        raise ValueError("every class needs a positive pixel count")
    w = 1.0 / n
    return w / w.mean()


@dataclass
class RegionBatch:
    """Pooled per-(image, class) region features.

    ``membership[r]`` holds the flat pixel indices (into the flattened
    B*H*W axis) averaged into region r; each pixel belongs to at most one
    region and empty regions never exist.
    """

    features: np.ndarray
    labels: np.ndarray
    membership: list = field(default_factory=list)
    pixel_shape: tuple = ()

    def __len__(self) -> int:
        return len(self.labels)


def region_pool(
    features: np.ndarray, gt: np.ndarray, ignore_label: int = IGNORE_LABEL
) -> RegionBatch:
    """Average pixel features per (image, present class) under the label map.

    ``features`` is B x H x W x D, ``gt`` is B x H x W. Ignored pixels join
    no region; an image of only ignored pixels simply contributes none.
    """
    features = np.asarray(features)
    gt = np.asarray(gt)
    if features.shape[:-1] != gt.shape:
        raise ValueError(f"feature grid {features.shape[:-1]} does not match labels {gt.shape}")
    b, h, w, d = features.shape
    flat_feat = features.reshape(b, h * w, d)
    flat_gt = gt.reshape(b, h * w)
    pooled, labels, membership = [], [], []
    for i in range(b):
        lab = flat_gt[i]
        for c in np.unique(lab[lab != ignore_label]):
            members = np.flatnonzero(lab == c)
            pooled.append(flat_feat[i, members].mean(axis=0))
            labels.append(int(c))
            membership.append(members + i * h * w)
    feats = np.array(pooled, dtype=np.float64) if pooled else np.zeros((0, d))
    return RegionBatch(
        features=feats,
        labels=np.array(labels, dtype=np.int64),
        membership=membership,
        pixel_shape=(b, h, w, d),
    )


def region_pool_backward(region_grad: np.ndarray, batch: RegionBatch) -> np.ndarray:
    """Scatter region gradients back to pixels: each member receives g / |members|."""
    b, h, w, d = batch.pixel_shape
    out = np.zeros((b * h * w, d), dtype=np.float64)
    for g, members in zip(region_grad, batch.membership):
        out[members] += g / len(members)
    return out.reshape(b, h, w, d)


@dataclass
class RegionLossResult:
    loss: float
    grad_features: np.ndarray
    grad_weight: np.ndarray
    grad_bias: np.ndarray


def region_loss(
    regions: RegionBatch, weight: np.ndarray, bias: np.ndarray, priors
) -> RegionLossResult:
    """Frequency-balanced region classification loss.

    Region logits come from the linear head (features @ weight + bias); the
    loss is the prior-shifted form with region frequencies as priors,
    averaged over regions:

        (1/|R|) sum_r -log( F(y_r) * e^{z_y} / sum_k F(k) * e^{z_k} ).

    Classes with frequency zero are dropped from the denominator sum (they
    never occur, and the zero prior removes their term from the formula);
    target classes must have positive frequency. Gradients are returned for
    the head parameters and the pooled region features.
    """
    if len(regions) == 0:
        raise ValueError("empty region batch")
    priors = np.asarray(priors, dtype=np.float64)
    if (priors < 0).any():
        raise ValueError("priors must be non-negative")
    if (priors[regions.labels] <= 0).any():
        raise ValueError("every target class needs a positive prior")
    feats = regions.features
    m = len(regions)
    logits = feats @ weight + bias
    log_priors = np.full(priors.shape, -np.inf)
    log_priors[priors > 0] = np.log(priors[priors > 0])
    ls = _log_softmax(logits + log_priors)
    rows = np.arange(m)
    loss = float(-ls[rows, regions.labels].mean())
    dlogits = np.exp(ls)
    dlogits[rows, regions.labels] -= 1.0
    dlogits /= m
    return RegionLossResult(
        loss=loss,
        grad_features=dlogits @ weight.T,
        grad_weight=feats.T @ dlogits,
        grad_bias=dlogits.sum(axis=0),
    )


def combined_loss(
    pixel: tuple[float, np.ndarray],
    region: tuple[float, np.ndarray],
    lam: float,
) -> tuple[float, np.ndarray]:
    """Total objective L_pixel + lambda * L_region with matching feature grads.

    Both branch gradients must be taken with respect to the same feature
    tensor; the combined gradient is their lambda-weighted sum. The region
    branch is train-only and never enters the inference path.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    p_loss, p_grad = pixel
    r_loss, r_grad = region
    if p_grad.shape != r_grad.shape:
        raise ValueError(f"branch gradient shapes differ: {p_grad.shape} vs {r_grad.shape}")
    return p_loss + lam * r_loss, p_grad + lam * r_grad
