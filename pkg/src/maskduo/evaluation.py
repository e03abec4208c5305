"""Evaluating frozen or fine-tuned encoders on labeled clips.

Two benchmark styles:

* linear probe: freeze the encoder, fit a single linear layer on clip
  features with plain minibatch SGD under a fixed, seeded recipe, so
  probe numbers are comparable across encoders;
* fine-tune: unfreeze everything, train encoder plus head with the
  usual spectrogram tricks (mixup, random resized crop, structured
  patch dropout), using per-benchmark presets.

Metrics are implemented here from their definitions (top-1 accuracy and
macro mean average precision with a stable descending sort) so tests
can pin them against brute-force enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .features import masked_mean_feature
from .patches import ShapeSpec
from .training import derive_seed, lr_at

__all__ = [
    "top1_accuracy",
    "average_precision",
    "macro_average_precision",
    "one_hot",
    "mixup",
    "random_resized_crop",
    "structured_patch_dropout",
    "ProbeConfig",
    "ProbeResult",
    "train_linear_probe",
    "FinetuneConfig",
    "FINETUNE_PRESETS",
    "FinetuneResult",
    "finetune",
]


# ----- metrics ---------------------------------------------------------------


def top1_accuracy(scores, labels) -> float:
    """Fraction of rows whose argmax (first on ties) equals the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ValueError(f"need (n, classes) scores and (n,) labels, got {scores.shape}, {labels.shape}")
    if scores.shape[0] == 0:
        raise ValueError("no rows to score")
    return float((scores.argmax(axis=1) == labels).mean())


def average_precision(scores, positives) -> float | None:
    """AP for one class: mean precision at each positive, descending scores.

    The sort is stable, so tied scores keep their original order.
    Returns None when the class has no positive examples.
    """
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(positives).astype(bool)
    if scores.shape != hits.shape or scores.ndim != 1:
        raise ValueError("scores and positives must be matching 1-D arrays")
    n_pos = int(hits.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    ranked = hits[order]
    cum = np.cumsum(ranked)
    precision = cum / np.arange(1, ranked.size + 1)
    return float(precision[ranked].sum() / n_pos)


def macro_average_precision(scores, targets) -> float:
    """Mean AP over classes, skipping classes with zero positives."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ValueError(f"need matching (n, classes) arrays, got {scores.shape}, {targets.shape}")
    aps = [average_precision(scores[:, k], targets[:, k]) for k in range(scores.shape[1])]
    kept = [a for a in aps if a is not None]
    if not kept:
        raise ValueError("every class has zero positives; nothing to average")
    return float(np.mean(kept))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    out = np.zeros((labels.size, n_classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


# ----- augmentations -----------------------------------------------------------


def mixup(inputs: torch.Tensor, targets: torch.Tensor, alpha: float, rng: np.random.Generator):
    """Convex-combine the batch with a shuffled copy of itself.

    One Beta(alpha, alpha) draw per batch; targets must already be soft
    (one-hot or probabilities).  alpha = 0 returns the batch untouched.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets disagree on batch size")
    if alpha == 0.0 or inputs.shape[0] < 2:
        return inputs, targets
    lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(inputs.shape[0]))
    mixed_x = lam * inputs + (1.0 - lam) * inputs[perm]
    mixed_y = lam * targets + (1.0 - lam) * targets[perm]
    return mixed_x, mixed_y


def random_resized_crop(
    spec: np.ndarray,
    rng: np.random.Generator,
    freq_scale: tuple[float, float] = (0.6, 1.0),
    time_scale: tuple[float, float] = (0.6, 1.0),
) -> np.ndarray:
    """Crop a random sub-rectangle and bilinearly resize back to full size."""
    if spec.ndim != 2:
        raise ValueError(f"expected a 2-D spectrogram, got shape {spec.shape}")
    f, t = spec.shape
    fs = rng.uniform(*freq_scale)
    ts = rng.uniform(*time_scale)
    fh = max(1, int(round(f * fs)))
    tw = max(1, int(round(t * ts)))
    f0 = int(rng.integers(0, f - fh + 1))
    t0 = int(rng.integers(0, t - tw + 1))
    crop = torch.from_numpy(np.ascontiguousarray(spec[f0 : f0 + fh, t0 : t0 + tw]))[None, None].float()
    out = F.interpolate(crop, size=(f, t), mode="bilinear", align_corners=False)
    return out[0, 0].numpy().astype(spec.dtype)


def structured_patch_dropout(
    n_freq: int,
    n_time: int,
    ratio: float,
    rng: np.random.Generator,
    structured: bool = True,
) -> np.ndarray:
    """Kept token indices after dropping about ``ratio`` of the grid.

    Structured mode removes whole frequency rows or time columns (picked
    uniformly) until the dropped fraction reaches ``ratio``, always
    keeping at least one row and one column; the kept set is then the
    cartesian product of surviving rows and columns.  The unstructured
    variant drops floor(ratio * n) individual tokens instead.  Indices
    come back sorted.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"drop ratio must be in [0, 1), got {ratio}")
    n = n_freq * n_time
    if not structured:
        n_drop = int(n * ratio)
        dropped = rng.permutation(n)[:n_drop]
        return np.setdiff1d(np.arange(n), dropped)
    rows = list(range(n_freq))
    cols = list(range(n_time))
    while 1.0 - (len(rows) * len(cols)) / n < ratio:
        can_row = len(rows) > 1
        can_col = len(cols) > 1
        if not can_row and not can_col:
            break
        axis_pool = (["row"] if can_row else []) + (["col"] if can_col else [])
        axis = axis_pool[int(rng.integers(0, len(axis_pool)))]
        if axis == "row":
            rows.pop(int(rng.integers(0, len(rows))))
        else:
            cols.pop(int(rng.integers(0, len(cols))))
    kept = np.array(sorted(r * n_time + c for r in rows for c in cols), dtype=np.int64)
    return kept


# ----- linear probe -------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """Fixed probe recipe; change it only deliberately, it defines the metric."""

    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class ProbeResult:
    train_top1: float
    test_top1: float
    test_map: float
    weight: np.ndarray
    bias: np.ndarray


def _feature_scaler(train_x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = train_x.mean(dim=0)
    std = train_x.std(dim=0, unbiased=False) + 1e-6
    return mean, std


def train_linear_probe(
    train_x, train_y, test_x, test_y, n_classes: int, cfg: ProbeConfig = ProbeConfig()
) -> ProbeResult:
    """Single linear layer on frozen features, minibatch SGD, cosine decay.

    Features are standardized per dimension with train-set statistics.
    Every random choice (init, batch order) derives from ``cfg.seed``.
    """
    train_x = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    test_x = torch.as_tensor(np.asarray(test_x), dtype=torch.float32)
    train_y = torch.as_tensor(np.asarray(train_y), dtype=torch.long)
    test_y_np = np.asarray(test_y, dtype=np.int64)
    if train_x.ndim != 2 or train_x.shape[0] != train_y.shape[0]:
        raise ValueError("train features/labels shapes disagree")
    mean, std = _feature_scaler(train_x)
    train_x = (train_x - mean) / std
    test_x = (test_x - mean) / std

    torch.manual_seed(cfg.seed)
    head = nn.Linear(train_x.shape[1], n_classes)
    opt = torch.optim.SGD(
        head.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    n = train_x.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            for group in opt.param_groups:
                group["lr"] = lr_at(step, total, 0, cfg.lr)
            opt.zero_grad()
            loss = F.cross_entropy(head(train_x[idx]), train_y[idx])
            loss.backward()
            opt.step()
            step += 1

    head.eval()
    with torch.no_grad():
        train_scores = head(train_x).numpy()
        test_scores = head(test_x).numpy()
    return ProbeResult(
        train_top1=top1_accuracy(train_scores, train_y.numpy()),
        test_top1=top1_accuracy(test_scores, test_y_np),
        test_map=macro_average_precision(test_scores, one_hot(test_y_np, n_classes)),
        weight=head.weight.detach().numpy().copy(),
        bias=head.bias.detach().numpy().copy(),
    )


# ----- fine-tuning ---------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    """End-to-end tuning recipe for one benchmark."""

    lr: float = 0.5
    optimizer: str = "sgd"
    mixup_alpha: float = 0.0
    use_rrc: bool = True
    spo_ratio: float = 0.5
    epochs: int = 200
    warmup_epochs: int = 5
    batch_size: int = 32
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.spo_ratio < 1.0:
            raise ValueError("spo_ratio must be in [0, 1)")


# per-benchmark settings: lr / optimizer / mixup / random resized crop / dropout
FINETUNE_PRESETS: dict[str, FinetuneConfig] = {
    "as20k": FinetuneConfig(lr=1.0, optimizer="sgd", mixup_alpha=0.3, use_rrc=True, spo_ratio=0.5),
    "esc50": FinetuneConfig(lr=0.5, optimizer="sgd", mixup_alpha=0.0, use_rrc=True, spo_ratio=0.5),
    "spcv2": FinetuneConfig(lr=0.5, optimizer="sgd", mixup_alpha=0.3, use_rrc=True, spo_ratio=0.5),
    "vc1": FinetuneConfig(lr=0.001, optimizer="adamw", mixup_alpha=0.0, use_rrc=False, spo_ratio=0.0),
}


@dataclass
class FinetuneResult:
    train_losses: list[float]
    test_top1: float
    test_map: float


class _TunedClassifier(nn.Module):
    def __init__(self, encoder: nn.Module, dim: int, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(dim, n_classes)

    def forward(self, tokens, positions, kept=None):
        if kept is None:
            z = self.encoder(tokens, positions)
            return self.head(z.mean(dim=1))
        z = self.encoder(tokens[:, kept], positions[kept])
        return self.head(masked_mean_feature(z, np.arange(kept.size)))


def finetune(
    encoder: nn.Module,
    shape: ShapeSpec,
    positions: torch.Tensor,
    tokenize: Callable[[np.ndarray], torch.Tensor],
    train_specs: np.ndarray,
    train_labels,
    test_specs: np.ndarray,
    test_labels,
    n_classes: int,
    cfg: FinetuneConfig,
) -> FinetuneResult:
    """Tune encoder + linear head on labeled spectrograms.

    ``tokenize`` maps a (B, n_mels, n_frames) array to (B, n_tokens,
    patch_dim) tokens; augmentations happen on the spectrogram (crop)
    and token-index (dropout) levels here, per batch.  The head reads
    the mean over encoded tokens (kept tokens when dropout is active),
    so train and eval see the same feature dimensionality.
    """
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(derive_seed(cfg.seed, 1))
    model = _TunedClassifier(encoder, shape.dim, n_classes)
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    labels_soft = torch.from_numpy(one_hot(train_labels, n_classes))
    n = train_specs.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    step = 0
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, 2, epoch)).permutation(n)
        model.train()
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = train_specs[idx]
            if cfg.use_rrc:
                batch = np.stack([random_resized_crop(s, rng) for s in batch])
            tokens = tokenize(batch)
            targets = labels_soft[torch.from_numpy(idx)]
            tokens, targets = mixup(tokens, targets, cfg.mixup_alpha, rng)
            kept = None
            if cfg.spo_ratio > 0:
                kept = structured_patch_dropout(shape.n_freq, shape.n_time, cfg.spo_ratio, rng)
            for group in opt.param_groups:
                group["lr"] = lr_at(step, total, warmup, cfg.lr)
            opt.zero_grad()
            logits = model(tokens, positions, kept)
            loss = -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1

    model.eval()
    with torch.no_grad():
        scores = model(tokenize(test_specs), positions).numpy()
    test_labels = np.asarray(test_labels, dtype=np.int64)
    return FinetuneResult(
        train_losses=losses,
        test_top1=top1_accuracy(scores, test_labels),
        test_map=macro_average_precision(scores, one_hot(test_labels, n_classes)),
    )
