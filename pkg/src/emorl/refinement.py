"""Stage 2: iterative amortized refinement of the top-layer posterior.

Each step feeds the current Gaussian parameters and the (stop-gradient,
layer-normalized) gradient of the step loss through a small weight-tied
network that emits an additive update. The loop is sequential in i by
construction; everything is batch- and slot-parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
from torch import Tensor

from .generative import DecoderOutput
from .hvae import GaussianParams, clamped_softplus


@dataclass
class StepLoss:
    loss: Tensor  # (B,) the term entering the training objective
    nll: Tensor   # (B,)
    kl: Tensor    # (B,)
    decoded: DecoderOutput | None = None


# evaluates one refinement-loss term at the given posterior, with fresh noise
StepLossFn = Callable[[GaussianParams, Tensor], StepLoss]


@dataclass
class RefinementTrace:
    posteriors: list[GaussianParams]      # lambda^(L,0..I)
    losses: list[StepLoss]                # terms at i = 0..I
    delta_norms: list[Tensor] = field(default_factory=list)  # (B,) per step
    grad_signals: list[Tensor] = field(default_factory=list)  # detached inputs

    @property
    def final(self) -> GaussianParams:
        return self.posteriors[-1]

    @property
    def final_decoded(self) -> DecoderOutput | None:
        return self.losses[-1].decoded


class RefinementNetwork(nn.Module):
    def __init__(self, latent_dim: int, hidden: int = 128):
        super().__init__()
        d = latent_dim
        self.latent_dim = d
        self.norm_lambda = nn.LayerNorm(2 * d)
        self.norm_grad = nn.LayerNorm(2 * d)
        self.mlp = nn.Sequential(
            nn.Linear(4 * d, hidden), nn.ELU(), nn.Linear(hidden, d), nn.ELU()
        )
        self.gru = nn.GRUCell(d, d)
        self.head_mu = nn.Linear(d, d)
        self.head_sigma = nn.Linear(d, d)

    def zero_update_init_(self):
        """Drive both heads to (near-)zero output: exact zero for the mean
        update, the softplus floor (~1e-5) for the scale update."""
        nn.init.zeros_(self.head_mu.weight)
        nn.init.zeros_(self.head_mu.bias)
        nn.init.zeros_(self.head_sigma.weight)
        nn.init.constant_(self.head_sigma.bias, -40.0)
        return self

    def grad_signal(self, grad_mu: Tensor, grad_sigma: Tensor) -> Tensor:
        """Stop-gradient + LayerNorm of the loss gradient wrt (mu, sigma)."""
        g = torch.cat([grad_mu, grad_sigma], dim=-1).detach()
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite refinement gradient")
        return self.norm_grad(g)

    def forward(
        self, lam: GaussianParams, signal: Tensor, hidden: Tensor
    ) -> tuple[Tensor, Tensor, Tensor]:
        """-> (delta_mu, delta_sigma, next_hidden); hidden is (B*K, D)."""
        b, k, d = lam.mu.shape
        lam_feat = self.norm_lambda(torch.cat([lam.mu, lam.sigma], dim=-1))
        x = self.mlp(torch.cat([lam_feat, signal], dim=-1))
        h = self.gru(x.reshape(b * k, d), hidden)
        out = h.reshape(b, k, d)
        return self.head_mu(out), clamped_softplus(self.head_sigma(out)), h


def refine_step(
    refiner: RefinementNetwork,
    lam: GaussianParams,
    signal: Tensor,
    hidden: Tensor,
) -> tuple[GaussianParams, Tensor, Tensor]:
    """Additive update lambda' = lambda + delta; returns (lambda', |delta|, hidden')."""
    delta_mu, delta_sigma, hidden = refiner(lam, signal, hidden)
    new = GaussianParams(
        mu=lam.mu + delta_mu, sigma=lam.sigma + delta_sigma,
        layer=lam.layer, step=lam.step + 1,
    )
    delta = torch.cat([delta_mu, delta_sigma], dim=-1)
    norm = delta.reshape(delta.shape[0], -1).norm(dim=1)
    return new, norm, hidden


def run_refinement(
    refiner: RefinementNetwork,
    lam0: GaussianParams,
    loss0: StepLoss,
    num_steps: int,
    step_loss_fn: StepLossFn,
    noise: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> RefinementTrace:
    """Run num_steps of gradient-driven refinement starting from lam0.

    loss0 must be the already-computed stage-1 term (its gradient drives the
    first step). noise, if given, is (num_steps, B, K, D); otherwise fresh
    draws come from the generator.
    """
    trace = RefinementTrace(posteriors=[lam0], losses=[loss0])
    if num_steps == 0:
        return trace
    b, k, d = lam0.mu.shape
    if noise is not None and noise.shape != (num_steps, b, k, d):
        raise ValueError(
            f"refinement noise shape {tuple(noise.shape)} != ({num_steps}, {b}, {k}, {d})"
        )
    hidden = torch.zeros(b * k, d, device=lam0.mu.device, dtype=lam0.mu.dtype)
    lam, prev_loss = lam0, loss0
    for i in range(1, num_steps + 1):
        grad_mu, grad_sigma = torch.autograd.grad(
            prev_loss.loss.sum(), [lam.mu, lam.sigma], retain_graph=True
        )
        signal = refiner.grad_signal(grad_mu, grad_sigma)
        trace.grad_signals.append(signal)
        lam, delta_norm, hidden = refine_step(refiner, lam, signal, hidden)
        step_noise = (
            noise[i - 1]
            if noise is not None
            else torch.randn(b, k, d, generator=generator,
                             device=lam.mu.device, dtype=lam.mu.dtype)
        )
        prev_loss = step_loss_fn(lam, step_noise)
        trace.posteriors.append(lam)
        trace.losses.append(prev_loss)
        trace.delta_norms.append(delta_norm)
    return trace
