"""Minimal per-pixel classifier and training loop.

The model is a two-layer MLP applied independently to each pixel's feature
vector: hidden = relu(x W1 + b1), logits = hidden W2 + b2. A separate linear
region head (W3, b3) classifies pooled region features during training with
the region_rebalance variant and is excluded from the inference path.

Training is SGD with momentum 0.9, weight decay, and the polynomial
learning-rate schedule lr0 * (1 - iter/total_iters) ** power. Everything is
seeded; a fixed (seed, config, dataset) triple reproduces the trajectory
bit for bit on one platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import losses, stats
from .metrics import IGNORE_LABEL, ConfusionMatrix, EvalReport
from .losses import LossConfig


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr0: float = 1e-2
    power: float = 0.9
    total_iters: int = 500
    batch_size: int = 8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    weight_decay: float = 1e-4
    momentum: float = 0.9
    val_fraction: float = 0.2
    d_hidden: int = 32
    # Concatenate a 3x3 box-filtered copy of the features to inject spatial
    # context; doubles the input width.
    mean_filter: bool = False

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.lr0 <= 0 or self.batch_size < 1:
            raise ValueError("lr0 must be positive and batch_size >= 1")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """Polynomial decay lr0 * (1 - iter/total_iters) ** power."""
    return cfg.lr0 * (1.0 - iteration / cfg.total_iters) ** cfg.power


def mean_filter_features(feat: np.ndarray) -> np.ndarray:
    """Append a 3x3 spatial mean of each channel: H x W x D -> H x W x 2D."""
    smoothed = uniform_filter(feat.astype(np.float64), size=(3, 3, 1), mode="nearest")
    return np.concatenate([feat, smoothed], axis=-1)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class PixelClassifier:
    """Two-layer MLP over pixel features plus a train-only region head."""

    def __init__(self, d_in: int, d_hidden: int, num_classes: int, seed: int = 0,
                 mean_filter: bool = False):
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.num_classes = num_classes
        self.mean_filter = mean_filter
        rng = np.random.default_rng([seed, 1])
        self.w1 = _glorot(rng, d_in, d_hidden)
        self.b1 = np.zeros(d_hidden)
        self.w2 = _glorot(rng, d_hidden, num_classes)
        self.b2 = np.zeros(num_classes)
        self.w3 = _glorot(rng, d_hidden, num_classes)
        self.b3 = np.zeros(num_classes)

    # Parameter blocks in checkpoint order; region head last.
    def parameters(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def prepare(self, feat: np.ndarray) -> np.ndarray:
        """Apply the configured input augmentation to one H x W x D image."""
        feat = np.asarray(feat, dtype=np.float64)
        return mean_filter_features(feat) if self.mean_filter else feat

    def hidden(self, x_flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(relu activations, pre-activations) for flattened pixel inputs."""
        pre = x_flat @ self.w1 + self.b1
        return np.maximum(pre, 0.0), pre

    def pixel_logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.w2 + self.b2

    def predict(self, feat: np.ndarray) -> np.ndarray:
        """Per-pixel argmax labels for one image; ties go to the lower index.

        Inference path only: the region head is never read here.
        """
        x = self.prepare(feat)
        h, w = x.shape[:2]
        hid, _ = self.hidden(x.reshape(-1, self.d_in))
        return self.pixel_logits(hid).argmax(axis=1).reshape(h, w).astype(np.uint16)


@dataclass
class TrainResult:
    model: PixelClassifier
    loss_curve: np.ndarray
    report: EvalReport
    train_table: stats.FrequencyTable
    train_indices: np.ndarray
    val_indices: np.ndarray


def split_indices(num_images: int, val_fraction: float, seed: int):
    """Deterministic train/val split of image indices."""
    rng = np.random.default_rng([seed, 0])
    perm = rng.permutation(num_images)
    n_val = int(round(num_images * val_fraction))
    n_val = min(max(n_val, 0), num_images - 1)
    return perm[n_val:], perm[:n_val]


def train(features: list, labels: list, cfg: TrainConfig) -> TrainResult:
    """Train one classifier under the configured loss variant.

    ``features`` and ``labels`` are parallel per-image lists. Class priors
    default to the train-split statistics: pixel counts for the pixel-level
    variants, region counts for the region branch. With lam == 0 the region
    branch is skipped entirely, which realizes the exact degeneracy of the
    combined objective and makes the trajectory bitwise equal to the plain
    cross-entropy baseline.
    """
    if len(features) != len(labels) or not features:
        raise ValueError("features and labels must be parallel non-empty lists")
    ignore = cfg.loss.ignore_label
    train_idx, val_idx = split_indices(len(features), cfg.val_fraction, cfg.seed)
    num_classes = _infer_num_classes(labels, ignore)
    table = stats.profile((labels[i] for i in train_idx), num_classes, ignore)

    variant = cfg.loss.variant
    if cfg.loss.priors is not None:
        pixel_priors = region_priors = np.asarray(cfg.loss.priors, dtype=np.float64)
    else:
        pixel_priors = table.pixel_freq.astype(np.float64)
        region_priors = table.region_freq.astype(np.float64)
    if variant in ("reweight", "balanced_pixel") and (pixel_priors <= 0).any():
        raise ValueError("pixel-variant priors must be positive for every class")

    d_feat = np.asarray(features[0]).shape[-1]
    d_in = 2 * d_feat if cfg.mean_filter else d_feat
    model = PixelClassifier(d_in, cfg.d_hidden, num_classes, seed=cfg.seed,
                            mean_filter=cfg.mean_filter)
    velocity = [np.zeros_like(p) for p in model.parameters()]
    batch_rng = np.random.default_rng([cfg.seed, 2])
    use_region = variant == "region_rebalance" and cfg.loss.lam > 0
    curve = []

    for it in range(cfg.total_iters):
        lr = poly_lr(it, cfg)
        batch = batch_rng.choice(train_idx, size=min(cfg.batch_size, len(train_idx)),
                                 replace=False)
        x = np.stack([model.prepare(features[i]) for i in batch])
        y = np.stack([np.asarray(labels[i]) for i in batch])
        b, h, w, _ = x.shape
        x_flat = x.reshape(-1, d_in)
        t_flat = y.reshape(-1)
        hid, pre = model.hidden(x_flat)
        z = model.pixel_logits(hid)

        if variant == "pixel_ce" or variant == "region_rebalance":
            loss_px, dz = losses.softmax_ce(z, t_flat, ignore_label=ignore)
        elif variant == "balanced_pixel":
            loss_px, dz = losses.balanced_softmax_ce(
                z, t_flat, pixel_priors, ignore_label=ignore, epsilon=cfg.loss.epsilon
            )
        else:  # reweight
            weights = losses.inverse_frequency_weights(pixel_priors)
            loss_px, dz = losses.reweighted_ce(z, t_flat, weights, ignore_label=ignore)

        dh = dz @ model.w2.T
        grad_w2 = hid.T @ dz
        grad_b2 = dz.sum(axis=0)
        total = loss_px
        grad_w3 = grad_b3 = None
        if use_region:
            regions = losses.region_pool(hid.reshape(b, h, w, -1), y, ignore_label=ignore)
            reg = losses.region_loss(regions, model.w3, model.b3, region_priors)
            dh_region = losses.region_pool_backward(reg.grad_features, regions)
            total = loss_px + cfg.loss.lam * reg.loss
            dh = dh + cfg.loss.lam * dh_region.reshape(-1, model.d_hidden)
            grad_w3 = cfg.loss.lam * reg.grad_weight
            grad_b3 = cfg.loss.lam * reg.grad_bias
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite loss {total} at iteration {it}")
        curve.append(total)

        dpre = dh * (pre > 0)
        grads = [x_flat.T @ dpre, dpre.sum(axis=0), grad_w2, grad_b2, grad_w3, grad_b3]
        for p, v, g in zip(model.parameters(), velocity, grads):
            if g is None:
                continue
            g = g + cfg.weight_decay * p
            v *= cfg.momentum
            v += g
            p -= lr * v

    report = evaluate(model, [features[i] for i in val_idx], [labels[i] for i in val_idx],
                      ignore_label=ignore)
    return TrainResult(
        model=model,
        loss_curve=np.array(curve),
        report=report,
        train_table=table,
        train_indices=train_idx,
        val_indices=val_idx,
    )


def _infer_num_classes(labels, ignore_label: int) -> int:
    top = 0
    for lab in labels:
        lab = np.asarray(lab)
        real = lab[lab != ignore_label]
        if real.size:
            top = max(top, int(real.max()))
    return top + 1


def evaluate(model: PixelClassifier, features: list, labels: list,
             ignore_label: int = IGNORE_LABEL) -> EvalReport:
    """Argmax inference plus confusion-matrix metrics over an image set."""
    if not features:
        raise ValueError("empty dataset")
    cm = ConfusionMatrix(model.num_classes, ignore_label=ignore_label)
    for feat, lab in zip(features, labels):
        cm.accumulate(np.asarray(lab), model.predict(feat))
    return cm.report()


# --- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = b"SBCKPT01"


def save_checkpoint(model: PixelClassifier, path) -> None:
    """Magic, little-endian u32 dims (d_in, d_hidden, C, mean_filter), then
    float64 little-endian parameter blocks in declared order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<4I", model.d_in, model.d_hidden, model.num_classes,
                             int(model.mean_filter)))
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> PixelClassifier:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        d_in, d_hidden, c, filt = struct.unpack("<4I", fh.read(16))
        model = PixelClassifier(d_in, d_hidden, c, mean_filter=bool(filt))
        for p in model.parameters():
            raw = fh.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ValueError(f"{path}: truncated parameter block")
            p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
    return model
