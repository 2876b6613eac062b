"""Stage 1: bottom-up inference over L stochastic layers.

Each layer assigns the N image tokens to K slots with scaled dot-product set
attention, fuses the attended features into the running Gaussian parameters
with a fused pair of GRUs, and applies residual mean/scale heads. All layer
parameters (including the LayerNorms) are shared across the L layers; the K
slots share weights by construction, which is what makes the posterior
permutation equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch import Tensor

from .encoder import ImageEmbedding

ATTENTION_EPS = 1e-8
SIGMA_FLOOR = 1e-5


def clamped_softplus(x: Tensor) -> Tensor:
    """log(1 + exp(min(x, 80))) + 1e-5; strictly positive, overflow-safe."""
    return torch.log1p(torch.exp(torch.clamp(x, max=80.0))) + 1e-5


@dataclass
class GaussianParams:
    """Diagonal-Gaussian parameters for the K slots; sigma is a std-dev."""

    mu: Tensor     # (B, K, D)
    sigma: Tensor  # (B, K, D), positive
    layer: int = 0
    step: int = 0

    def sample(self, noise: Tensor) -> Tensor:
        return self.mu + self.sigma * noise

    def expand_as_slots(self, batch: int, num_slots: int) -> "GaussianParams":
        shape = (batch, num_slots, self.mu.shape[-1])
        return GaussianParams(
            self.mu.expand(shape), self.sigma.expand(shape), self.layer, self.step
        )

    def detach(self) -> "GaussianParams":
        return GaussianParams(
            self.mu.detach(), self.sigma.detach(), self.layer, self.step
        )


def standard_gaussian_like(mu: Tensor) -> GaussianParams:
    return GaussianParams(torch.zeros_like(mu), torch.ones_like(mu))


def reparameterized_sample(params: GaussianParams, noise: Tensor) -> Tensor:
    """z = mu + sigma * noise, differentiable in (mu, sigma)."""
    return params.sample(noise)


@dataclass
class AttentionState:
    alpha: Tensor          # (B, K, N), rows renormalized to sum 1 over N
    alpha_softmax: Tensor  # (B, K, N), per-token softmax over K (pre-renorm)
    theta: Tensor          # (B, K, D)


@dataclass
class BottomUpTrajectory:
    """Per-layer posteriors lambda^1..L and samples z^0..z^L."""

    posteriors: list[GaussianParams] = field(default_factory=list)
    samples: list[Tensor] = field(default_factory=list)
    attention: list[AttentionState] = field(default_factory=list)

    @property
    def final(self) -> GaussianParams:
        return self.posteriors[-1]


class DualGru(nn.Module):
    """Two independent D-unit GRUs fused into one cell over a 2D state.

    The fused weight matrices are block-diagonal in the two branches (one
    advancing the mean, one the scale), so a single matmul runs both GRUs on
    the concatenated input [theta; theta] and hidden [mu; sigma].
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        k = 1.0 / math.sqrt(dim)
        for branch in ("mu", "sigma"):
            # rows are the r, z, n gate blocks, GRUCell layout
            self.register_parameter(
                f"weight_ih_{branch}", nn.Parameter(torch.empty(3 * dim, dim))
            )
            self.register_parameter(
                f"weight_hh_{branch}", nn.Parameter(torch.empty(3 * dim, dim))
            )
            self.register_parameter(
                f"bias_ih_{branch}", nn.Parameter(torch.empty(3 * dim))
            )
            self.register_parameter(
                f"bias_hh_{branch}", nn.Parameter(torch.empty(3 * dim))
            )
        for p in self.parameters():
            nn.init.uniform_(p, -k, k)

    def _gate_blocks(self, name: str) -> tuple[Tensor, Tensor]:
        w = getattr(self, name)
        d = self.dim
        return w[: 2 * d], w[2 * d :]  # (r,z) block and n block

    @property
    def fused_weight_ih(self) -> Tensor:
        """(4D, 2D) block-diagonal reset/update input weights."""
        a, _ = self._gate_blocks("weight_ih_mu")
        b, _ = self._gate_blocks("weight_ih_sigma")
        return torch.block_diag(a, b)

    @property
    def fused_weight_hh(self) -> Tensor:
        a, _ = self._gate_blocks("weight_hh_mu")
        b, _ = self._gate_blocks("weight_hh_sigma")
        return torch.block_diag(a, b)

    @property
    def fused_weight_in(self) -> Tensor:
        """(2D, 2D) block-diagonal candidate input weights."""
        _, a = self._gate_blocks("weight_ih_mu")
        _, b = self._gate_blocks("weight_ih_sigma")
        return torch.block_diag(a, b)

    @property
    def fused_weight_hn(self) -> Tensor:
        _, a = self._gate_blocks("weight_hh_mu")
        _, b = self._gate_blocks("weight_hh_sigma")
        return torch.block_diag(a, b)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        """x, h: (..., 2D) -> next hidden (..., 2D)."""
        d = self.dim
        bias_rz_i = torch.cat([self.bias_ih_mu[: 2 * d], self.bias_ih_sigma[: 2 * d]])
        bias_rz_h = torch.cat([self.bias_hh_mu[: 2 * d], self.bias_hh_sigma[: 2 * d]])
        bias_n_i = torch.cat([self.bias_ih_mu[2 * d :], self.bias_ih_sigma[2 * d :]])
        bias_n_h = torch.cat([self.bias_hh_mu[2 * d :], self.bias_hh_sigma[2 * d :]])
        gi = x @ self.fused_weight_ih.t() + bias_rz_i  # (..., 4D): r_mu z_mu r_sig z_sig
        gh = h @ self.fused_weight_hh.t() + bias_rz_h
        g = torch.sigmoid(gi + gh)
        r = torch.cat([g[..., :d], g[..., 2 * d : 3 * d]], dim=-1)
        u = torch.cat([g[..., d : 2 * d], g[..., 3 * d :]], dim=-1)
        n = torch.tanh(
            x @ self.fused_weight_in.t()
            + bias_n_i
            + r * (h @ self.fused_weight_hn.t() + bias_n_h)
        )
        return (1 - u) * n + u * h


class PosteriorLayer(nn.Module):
    """The shared stochastic-layer parameters (one instance serves all L layers)."""

    def __init__(self, token_dim: int, latent_dim: int):
        super().__init__()
        d = latent_dim
        self.latent_dim = d
        self.norm_z = nn.LayerNorm(d)
        self.to_k = nn.Linear(token_dim, d, bias=False)
        self.to_v = nn.Linear(token_dim, d, bias=False)
        self.to_q = nn.Linear(d, d, bias=False)
        self.gru = DualGru(d)
        self.norm_mu = nn.LayerNorm(d)
        self.norm_sigma = nn.LayerNorm(d)
        self.mlp_mu = nn.Sequential(
            nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d)
        )
        self.mlp_sigma = nn.Sequential(
            nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d)
        )

    def attend(self, keys: Tensor, values: Tensor, z: Tensor) -> AttentionState:
        """Set attention: softmax over slots per token, then per-slot renorm over N."""
        q = self.to_q(self.norm_z(z))  # (B, K, D)
        logits = torch.einsum("bkd,bnd->bkn", q, keys) / math.sqrt(self.latent_dim)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite attention logits")
        alpha_softmax = torch.softmax(logits, dim=1)
        shifted = alpha_softmax + ATTENTION_EPS
        alpha = shifted / shifted.sum(dim=2, keepdim=True)
        theta = torch.einsum("bkn,bnd->bkd", alpha, values)
        return AttentionState(alpha=alpha, alpha_softmax=alpha_softmax, theta=theta)

    def fuse(self, theta: Tensor, lambda_prev: GaussianParams) -> tuple[Tensor, Tensor]:
        """DualGRU of [theta; theta] against hidden [mu; sigma] -> raw (mu, sigma)."""
        x = torch.cat([theta, theta], dim=-1)
        h = torch.cat([lambda_prev.mu, lambda_prev.sigma], dim=-1)
        out = self.gru(x, h)
        return out[..., : self.latent_dim], out[..., self.latent_dim :]

    def heads(self, mu_raw: Tensor, sigma_raw: Tensor, layer: int = 0) -> GaussianParams:
        """Residual refinement of the raw GRU outputs; sigma kept >= 1e-5."""
        mu = mu_raw + self.mlp_mu(self.norm_mu(mu_raw))
        sigma = sigma_raw + clamped_softplus(self.mlp_sigma(self.norm_sigma(sigma_raw)))
        sigma = torch.clamp(sigma, min=SIGMA_FLOOR)
        return GaussianParams(mu=mu, sigma=sigma, layer=layer)

    def forward(
        self, keys: Tensor, values: Tensor, z_prev: Tensor, lambda_prev: GaussianParams,
        layer: int = 0,
    ) -> tuple[AttentionState, GaussianParams]:
        attn = self.attend(keys, values, z_prev)
        mu_raw, sigma_raw = self.fuse(attn.theta, lambda_prev)
        return attn, self.heads(mu_raw, sigma_raw, layer=layer)


class BottomUpPosterior(nn.Module):
    """z^0 symmetry breaking plus L chained stochastic layers."""

    def __init__(self, token_dim: int, latent_dim: int, num_layers: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.num_layers = num_layers
        self.layer = PosteriorLayer(token_dim, latent_dim)
        self.mu0 = nn.Parameter(torch.zeros(latent_dim))
        self.sigma0 = nn.Parameter(torch.ones(latent_dim))

    def draw_noise(
        self,
        batch: int,
        num_slots: int,
        generator: torch.Generator | None = None,
        device=None,
        dtype=None,
    ) -> Tensor:
        return torch.randn(
            batch, self.num_layers + 1, num_slots, self.latent_dim,
            generator=generator,
            device=device if device is not None else self.mu0.device,
            dtype=dtype if dtype is not None else self.mu0.dtype,
        )

    def initial_params(self, batch: int, num_slots: int) -> GaussianParams:
        base = GaussianParams(self.mu0, self.sigma0)
        return base.expand_as_slots(batch, num_slots)

    def forward(
        self,
        embedding: ImageEmbedding | Tensor,
        num_slots: int,
        noise: Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> BottomUpTrajectory:
        tokens = embedding.tokens if isinstance(embedding, ImageEmbedding) else embedding
        b = tokens.shape[0]
        if noise is None:
            noise = self.draw_noise(
                b, num_slots, generator, device=tokens.device, dtype=tokens.dtype
            )
        if noise.shape != (b, self.num_layers + 1, num_slots, self.latent_dim):
            raise ValueError(
                f"noise shape {tuple(noise.shape)} != "
                f"({b}, {self.num_layers + 1}, {num_slots}, {self.latent_dim})"
            )
        keys = self.layer.to_k(tokens)
        values = self.layer.to_v(tokens)
        lam = self.initial_params(b, num_slots)
        z = reparameterized_sample(lam, noise[:, 0])
        traj = BottomUpTrajectory(samples=[z])
        for l in range(1, self.num_layers + 1):
            attn, lam = self.layer(keys, values, z, lam, layer=l)
            z = reparameterized_sample(lam, noise[:, l])
            traj.attention.append(attn)
            traj.posteriors.append(lam)
            traj.samples.append(z)
        return traj
