"""Transformer backbone: the patch encoder shared by both networks, and the
narrow predictor that maps visible-token representations to predictions for
every grid slot.

The encoder is a plain pre-norm ViT over flattened patch tokens: a linear
patch embedding, ``depth`` blocks of multi-head attention + MLP, and a final
LayerNorm.  No class token, no dropout, no relative biases.  A depth-0
encoder degenerates to patch embedding plus positions (handy as a test stub).

The predictor re-assembles the full-length sequence (visible representations
at their slots, one shared learnable mask token everywhere else), adds the
same positional encoding the encoders use, runs a narrower transformer, and
projects back to encoder width so predictions are comparable with encoder
outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

__all__ = [
    "EncoderConfig",
    "PredictorConfig",
    "TransformerBlock",
    "PatchEncoder",
    "Predictor",
    "predict_all_slots",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of the patch encoder.

    Presets: ``paper_base()`` is the full-scale ViT-Base geometry,
    ``toy()`` the small configuration the test suite trains on CPU.
    """

    depth: int = 12
    heads: int = 12
    width: int = 768
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.depth > 0 and self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @classmethod
    def paper_base(cls) -> "EncoderConfig":
        return cls(depth=12, heads=12, width=768, mlp_ratio=4.0)

    @classmethod
    def toy(cls) -> "EncoderConfig":
        return cls(depth=2, heads=4, width=96, mlp_ratio=4.0)


@dataclass(frozen=True)
class PredictorConfig:
    """Geometry of the predictor (or of the pixel decoder in baseline mode).

    ``width`` is the internal transformer width; the output projection
    always maps back to whatever dimension the caller asks for, which for
    latent prediction must equal the encoder width.
    """

    depth: int = 4
    heads: int = 6
    width: int = 384
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.depth > 0 and self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @classmethod
    def paper_base(cls) -> "PredictorConfig":
        return cls(depth=4, heads=6, width=384, mlp_ratio=4.0)

    @classmethod
    def toy(cls) -> "PredictorConfig":
        return cls(depth=2, heads=4, width=48, mlp_ratio=4.0)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PatchEncoder(nn.Module):
    """Encoder ``f``: flattened patch tokens + positions -> one vector per token.

    The same architecture serves as the online encoder (trained by
    gradient) and the momentum target encoder (updated only by EMA);
    their parameter sets are shape-congruent by construction.
    """

    def __init__(self, patch_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_dim = patch_dim
        self.embed = nn.Linear(patch_dim, cfg.width)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        # depth-0 stub contract: output == embed(tokens) + positions, no norm
        self.norm = nn.LayerNorm(cfg.width) if cfg.depth > 0 else nn.Identity()

    @property
    def width(self) -> int:
        return self.cfg.width

    def forward(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Encode ``tokens`` (B, n, patch_dim) with row-aligned ``positions``.

        ``positions`` is (n, width) or (B, n, width); rows must match the
        token rows one for one.
        """
        if tokens.ndim != 3:
            raise ValueError(f"tokens must be (batch, n, patch_dim), got {tuple(tokens.shape)}")
        if positions.shape[-2] != tokens.shape[1] or positions.shape[-1] != self.cfg.width:
            raise ValueError(
                f"positions {tuple(positions.shape)} not row-aligned with "
                f"tokens {tuple(tokens.shape)} (encoder width {self.cfg.width})"
            )
        x = self.embed(tokens) + positions
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class Predictor(nn.Module):
    """Predictor ``g``: a narrow transformer over the full token grid.

    Projects encoder-width inputs down to ``cfg.width``, runs the blocks,
    and projects to ``output_dim`` (encoder width for latent prediction,
    patch dimension for the pixel-reconstruction baseline).
    """

    def __init__(self, input_dim: int, cfg: PredictorConfig, output_dim: int):
        super().__init__()
        self.cfg = cfg
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.proj_in = nn.Linear(input_dim, cfg.width)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.width)
        self.proj_out = nn.Linear(cfg.width, output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.proj_in(x)
        for block in self.blocks:
            x = block(x)
        return self.proj_out(self.norm(x))


def predict_all_slots(
    z_visible: torch.Tensor,
    visible_idx: torch.Tensor,
    masked_idx: torch.Tensor,
    positions: torch.Tensor,
    mask_token: torch.Tensor,
    predictor: nn.Module,
) -> torch.Tensor:
    """Predict representations for every grid slot from visible ones.

    Places ``z_visible`` (B, n_vis, D) rows back at their original grid
    slots, fills every masked slot with the shared ``mask_token`` (D,),
    adds ``positions`` (N, D), and runs ``predictor`` over the restored
    full-length sequence.  Returns (B, N, out_dim).
    """
    batch, n_vis, width = z_visible.shape
    if visible_idx.shape != (batch, n_vis):
        raise ValueError(
            f"visible representation rows {tuple(z_visible.shape)} do not match "
            f"plan visible indices {tuple(visible_idx.shape)}"
        )
    n_total = n_vis + masked_idx.shape[1]
    if positions.shape != (n_total, width):
        raise ValueError(
            f"positions {tuple(positions.shape)} do not cover {n_total} slots of width {width}"
        )
    full = z_visible.new_zeros(batch, n_total, width)
    full.scatter_(1, visible_idx.unsqueeze(-1).expand(-1, -1, width), z_visible)
    if masked_idx.shape[1]:
        fill = mask_token.to(z_visible.dtype).expand(batch, masked_idx.shape[1], width)
        full = full.scatter(1, masked_idx.unsqueeze(-1).expand(-1, -1, width), fill)
    return predictor(full + positions)
