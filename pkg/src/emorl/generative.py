"""Generative side: hierarchical prior variants, broadcast decoder, likelihoods."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .encoder import positional_grid
from .hvae import GaussianParams, clamped_softplus, standard_gaussian_like

PRIOR_VARIANTS = ("bottom_up", "reversed", "reversed_pp")


class PriorNetwork(nn.Module):
    """Conditional Gaussian p(z | z'), weight-tied over slots and shared across
    the L-1 data-dependent prior layers."""

    def __init__(self, latent_dim: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(latent_dim, hidden), nn.ELU())
        self.head_mu = nn.Linear(hidden, latent_dim)
        self.head_sigma = nn.Linear(hidden, latent_dim)

    def forward(self, z: Tensor) -> GaussianParams:
        h = self.net(z)
        return GaussianParams(
            mu=self.head_mu(h), sigma=clamped_softplus(self.head_sigma(h))
        )


@dataclass
class PriorTargets:
    per_layer: list[GaussianParams]  # targets for layers 1..L
    refinement: GaussianParams       # target of the stage-2 KL term


def prior_targets(
    variant: str, samples: list[Tensor], prior_net: PriorNetwork
) -> PriorTargets:
    """Per-layer and refinement-KL Gaussian targets, conditioned on the sampled
    trajectory (samples[l] is z^l, samples[0] = z^0)."""
    if variant not in PRIOR_VARIANTS:
        raise ValueError(f"unknown prior variant {variant!r}")
    num_layers = len(samples) - 1
    # reversed at L=1 degenerates to a single standard-Gaussian target;
    # reversed_pp genuinely needs z^2 for its refinement target
    if variant == "reversed_pp" and num_layers < 2:
        raise ValueError(f"{variant!r} prior needs at least 2 layers")
    std = standard_gaussian_like(samples[-1])
    if variant == "bottom_up":
        per_layer = [std] + [prior_net(samples[l - 1]) for l in range(2, num_layers + 1)]
        refinement = prior_net(samples[num_layers - 1])
        return PriorTargets(per_layer=per_layer, refinement=refinement)
    per_layer = [prior_net(samples[l + 1]) for l in range(1, num_layers)] + [std]
    if variant == "reversed":
        refinement = std
    else:  # reversed_pp: pull the refined top posterior toward p(z^1 | z^2)
        refinement = prior_net(samples[2])
    return PriorTargets(per_layer=per_layer, refinement=refinement)


@dataclass
class DecoderOutput:
    pi: Tensor  # (B, K, H, W), simplex over K per pixel
    y: Tensor   # (B, K, 3, H, W) in [0, 1]

    def composite(self) -> Tensor:
        """Mask-weighted reconstruction, (B, 3, H, W)."""
        return (self.pi.unsqueeze(2) * self.y).sum(dim=1)


_DECODER_STACKS = {
    # (margin, kernel, padding, n_hidden_convs)
    "standard": (10, 3, 0, 4),
    "light": (6, 5, 1, 2),
}


class SpatialBroadcastDecoder(nn.Module):
    """Broadcast each slot over a padded grid, add projected positional ramps,
    and shrink back to H x W with valid-ish convs; slots decoded independently."""

    def __init__(
        self, latent_dim: int, height: int, width: int, kind: str = "standard",
        channels: int = 64,
    ):
        super().__init__()
        if kind not in _DECODER_STACKS:
            raise ValueError(f"unknown decoder kind {kind!r}")
        margin, kernel, padding, n_hidden = _DECODER_STACKS[kind]
        shrink = (n_hidden + 1) * (kernel - 1 - 2 * padding)
        if shrink != margin:
            raise ValueError(
                f"decoder margin {margin} does not match conv shrink {shrink}"
            )
        self.kind = kind
        self.height = height
        self.width = width
        self.margin = margin
        self.pos_proj = nn.Linear(4, latent_dim)
        layers: list[nn.Module] = []
        in_ch = latent_dim
        for _ in range(n_hidden):
            layers += [nn.Conv2d(in_ch, channels, kernel, padding=padding), nn.ELU()]
            in_ch = channels
        layers += [nn.Conv2d(in_ch, 4, kernel, padding=padding)]
        self.convs = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> DecoderOutput:
        b, k, d = z.shape
        gh, gw = self.height + self.margin, self.width + self.margin
        grid = positional_grid(gh, gw, device=z.device, dtype=z.dtype)
        pos = self.pos_proj(grid).permute(2, 0, 1)  # (D, gh, gw)
        h = z.reshape(b * k, d, 1, 1).expand(b * k, d, gh, gw) + pos
        out = self.convs(h)
        if out.shape[-2:] != (self.height, self.width):
            raise RuntimeError(
                f"decoder produced {tuple(out.shape[-2:])}, expected "
                f"({self.height}, {self.width})"
            )
        out = out.reshape(b, k, 4, self.height, self.width)
        pi = torch.softmax(out[:, :, 0], dim=1)
        y = torch.sigmoid(out[:, :, 1:])
        return DecoderOutput(pi=pi, y=y)


def gaussian_nll(x: Tensor, out: DecoderOutput, sigma_lik: float) -> Tensor:
    """NLL of a fixed-variance Gaussian on the mask-weighted reconstruction.

    x: (B, 3, H, W) in [0, 1]. Returns per-image sums, shape (B,).
    """
    recon = out.composite()
    b = x.shape[0]
    n_vals = x[0].numel()
    sq = ((x - recon) ** 2).reshape(b, -1).sum(dim=1)
    const = 0.5 * n_vals * math.log(2 * math.pi * sigma_lik**2)
    return const + sq / (2 * sigma_lik**2)


def mog_nll(x: Tensor, out: DecoderOutput, sigma_lik: float) -> Tensor:
    """NLL of the pixel-wise mixture: each pixel drawn from one of K Gaussians
    weighted by pi. Log-sum-exp stabilized; returns (B,)."""
    b = x.shape[0]
    sq = ((x.unsqueeze(1) - out.y) ** 2).sum(dim=2)  # (B, K, H, W)
    log_norm = 1.5 * math.log(2 * math.pi * sigma_lik**2)
    log_comp = torch.log(out.pi) - log_norm - sq / (2 * sigma_lik**2)
    log_px = torch.logsumexp(log_comp, dim=1)  # (B, H, W)
    return -log_px.reshape(b, -1).sum(dim=1)
