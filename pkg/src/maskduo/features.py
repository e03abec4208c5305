"""Turning encoder token outputs into clip-level feature vectors.

The encoder emits one vector per grid cell.  For audio work the usual
summary keeps the time axis and concatenates across frequency: token
grid (n_freq, n_time, dim) -> frame features (n_time, n_freq * dim) ->
clip feature by averaging over time.  Long clips are split into
segments upstream; their clip features combine by a mean weighted with
each segment's real (unpadded) frame count.
"""

from __future__ import annotations

import numpy as np
import torch

from .checkpoint import save_archive
from .patches import ShapeSpec

__all__ = [
    "frame_level_features",
    "clip_feature",
    "long_clip_feature",
    "masked_mean_feature",
    "extract_clip_features",
    "save_features",
]


def _to_tensor(z) -> torch.Tensor:
    return z if torch.is_tensor(z) else torch.from_numpy(np.asarray(z))


def frame_level_features(z, shape: ShapeSpec) -> torch.Tensor:
    """(B, n_patches, dim) -> (B, n_time, n_freq * dim).

    Token order is frequency-major (token i sits at row i // n_time,
    column i % n_time), so the reshape is exact, not a heuristic.
    """
    z = _to_tensor(z)
    squeeze = z.ndim == 2
    if squeeze:
        z = z[None]
    b, n, d = z.shape
    if n != shape.n_patches or d != shape.dim:
        raise ValueError(
            f"got {n} tokens of width {d}, grid says {shape.n_patches} of width {shape.dim}"
        )
    out = z.reshape(b, shape.n_freq, shape.n_time, d).transpose(1, 2).reshape(
        b, shape.n_time, shape.n_freq * d
    )
    return out[0] if squeeze else out


def clip_feature(z, shape: ShapeSpec) -> torch.Tensor:
    """(B, n_patches, dim) -> (B, n_freq * dim): frame features meaned over time."""
    frames = frame_level_features(z, shape)
    return frames.mean(dim=-2)


def long_clip_feature(segment_features, valid_frames) -> torch.Tensor:
    """Weighted mean of per-segment clip features.

    ``segment_features`` is (n_segments, feat_dim); ``valid_frames``
    holds each segment's unpadded frame count, used as the weight so a
    mostly-padding tail segment does not dominate.
    """
    feats = _to_tensor(segment_features).double()
    weights = torch.as_tensor(np.asarray(valid_frames, dtype=np.float64))
    if feats.ndim != 2 or weights.ndim != 1 or feats.shape[0] != weights.shape[0]:
        raise ValueError(
            f"need (n_segments, dim) features with one weight per segment, got "
            f"{tuple(feats.shape)} and {tuple(weights.shape)}"
        )
    if (weights <= 0).any():
        raise ValueError("segment frame counts must be positive")
    return (feats * weights[:, None]).sum(dim=0) / weights.sum()


def masked_mean_feature(z, kept_indices) -> torch.Tensor:
    """Mean encoder output over the kept tokens only, (B, dim).

    Used when structured patch dropout removed tokens at fine-tune time;
    the summary must ignore the dropped slots entirely.
    """
    z = _to_tensor(z)
    if z.ndim != 3:
        raise ValueError(f"expected (B, n_tokens, dim), got shape {tuple(z.shape)}")
    idx = torch.as_tensor(np.asarray(kept_indices), dtype=torch.long)
    if idx.ndim == 1:
        idx = idx.expand(z.shape[0], -1)
    if idx.shape[0] != z.shape[0] or idx.shape[1] == 0:
        raise ValueError("kept_indices must be (B, k>=1) or (k>=1,)")
    gathered = z.gather(1, idx.unsqueeze(-1).expand(-1, -1, z.shape[-1]))
    return gathered.mean(dim=1)


def extract_clip_features(
    encoder: torch.nn.Module,
    shape: ShapeSpec,
    positions: torch.Tensor,
    tokens: torch.Tensor,
    batch_size: int = 32,
) -> torch.Tensor:
    """Clip features for a tokenized corpus, in eval mode, no gradients."""
    was_training = encoder.training
    encoder.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, tokens.shape[0], batch_size):
            chunk = tokens[start : start + batch_size]
            z = encoder(chunk, positions)
            feats.append(clip_feature(z, shape))
    if was_training:
        encoder.train()
    return torch.cat(feats, dim=0)


def save_features(path, features, labels, extra: dict | None = None):
    """Archive a feature matrix with integer labels and provenance."""
    feats = np.asarray(features, dtype=np.float32)
    labs = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or labs.shape != (feats.shape[0],):
        raise ValueError(f"need (n, dim) features and (n,) labels, got {feats.shape}, {labs.shape}")
    return save_archive(path, {"features": feats, "labels": labs}, kind="features", extra=extra)
