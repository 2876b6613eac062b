"""Image backbone: CNN features + cardinal-direction positional ramps -> tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor


def positional_grid(
    height: int,
    width: int,
    device: torch.device | str | None = None,
    dtype: torch.dtype | None = None,
) -> Tensor:
    """(H, W, 4) linear ramps in [0, 1]: left, right, top, bottom.

    A degenerate axis (H == 1 or W == 1) contributes constant-zero channels.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid needs H, W >= 1, got {height}x{width}")
    kw = dict(device=device, dtype=dtype or torch.get_default_dtype())
    grid = torch.zeros(height, width, 4, **kw)
    if width > 1:
        ramp = torch.arange(width, **kw) / (width - 1)
        grid[:, :, 0] = 1 - ramp
        grid[:, :, 1] = ramp
    if height > 1:
        ramp = (torch.arange(height, **kw) / (height - 1)).unsqueeze(1)
        grid[:, :, 2] = 1 - ramp
        grid[:, :, 3] = ramp
    return grid


@dataclass
class ImageEmbedding:
    tokens: Tensor  # (B, N, C) with N = H*W, row-major over (H, W)
    height: int
    width: int


class ImageEncoder(nn.Module):
    """Four stride-1 5x5 convs, additive projected positional ramps, LN + MLP."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.channels = channels
        self.convs = nn.Sequential(
            nn.Conv2d(3, channels, 5, stride=1, padding=2), nn.ReLU(),
            nn.Conv2d(channels, channels, 5, stride=1, padding=2), nn.ReLU(),
            nn.Conv2d(channels, channels, 5, stride=1, padding=2), nn.ReLU(),
            nn.Conv2d(channels, channels, 5, stride=1, padding=2), nn.ReLU(),
        )
        self.pos_proj = nn.Linear(4, channels)
        self.norm = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, channels), nn.ReLU(), nn.Linear(channels, channels)
        )

    def spatial_features(self, images: Tensor) -> Tensor:
        """Pre-LayerNorm features (B, H, W, C): conv output + projected ramps."""
        if not torch.isfinite(images).all():
            raise ValueError("non-finite values in input image")
        feats = self.convs(images).permute(0, 2, 3, 1)  # (B, H, W, C)
        grid = positional_grid(
            feats.shape[1], feats.shape[2], device=feats.device, dtype=feats.dtype
        )
        return feats + self.pos_proj(grid)

    def forward(self, images: Tensor) -> ImageEmbedding:
        b, _, h, w = images.shape
        feats = self.spatial_features(images)
        tokens = self.mlp(self.norm(feats.reshape(b, h * w, self.channels)))
        return ImageEmbedding(tokens=tokens, height=h, width=w)
