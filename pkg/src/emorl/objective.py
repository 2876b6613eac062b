"""Losses: closed-form Gaussian KL, ELBO terms, the discounted multi-step
total, and the GECO constraint controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
from torch import Tensor

from .hvae import GaussianParams


def diag_gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over slots and dims -> (B,)."""
    term = (
        torch.log(p.sigma / q.sigma)
        + (q.sigma**2 + (q.mu - p.mu) ** 2) / (2 * p.sigma**2)
        - 0.5
    )
    return term.reshape(term.shape[0], -1).sum(dim=1)


def discount_weights(num_refinements: int) -> list[float]:
    """Eq-weights (I-(i-1))/(I+1) for i = 1..I; decreasing, favors early terms."""
    i_total = num_refinements
    return [(i_total - (i - 1)) / (i_total + 1) for i in range(1, i_total + 1)]


def discounted_total(loss0: Tensor | float, refinement_losses: list) -> Tensor | float:
    total = loss0
    for w, term in zip(discount_weights(len(refinement_losses)), refinement_losses):
        total = total + w * term
    return total


@dataclass
class GecoState:
    """Lagrange controller holding reconstruction to a threshold.

    loss = KL + softplus(zeta) * (NLL - nll_threshold); reconstruction worse
    than the threshold drives zeta up (via the negative slack EMA), better
    drives it down until the clamp at zeta_min keeps softplus(zeta) >= 1.
    """

    nll_threshold: float
    zeta: float = 0.55
    c_ema: float = 0.0
    ema_alpha: float = 0.99
    update_rate: float = 1e-6
    zeta_min: float = 0.55

    @property
    def multiplier(self) -> float:
        return math.log1p(math.exp(self.zeta))


def geco_apply(nll: Tensor | float, kl: Tensor | float, state: GecoState):
    return kl + state.multiplier * (nll - state.nll_threshold)


def geco_update(state: GecoState, batch_nll: float) -> GecoState:
    """One controller step from the mini-batch reconstruction error."""
    slack = state.nll_threshold - batch_nll
    c_ema = state.ema_alpha * state.c_ema + (1 - state.ema_alpha) * slack
    zeta = max(state.zeta_min, state.zeta - state.update_rate * c_ema)
    return replace(state, c_ema=c_ema, zeta=zeta)


def loss_term(nll: Tensor, kl: Tensor, geco: GecoState | None) -> Tensor:
    """One negative-ELBO term, GECO-wrapped when a controller is active."""
    if geco is None:
        return nll + kl
    return geco_apply(nll, kl, geco)


@dataclass
class LossBreakdown:
    """Scalar views of one training step's losses (per-image batch means)."""

    nll: float
    kl_per_layer: list[float]
    loss0: float
    refinement_nll: list[float] = field(default_factory=list)
    refinement_kl: list[float] = field(default_factory=list)
    refinement_loss: list[float] = field(default_factory=list)
    delta_norms: list[float] = field(default_factory=list)
    total: float = 0.0

    def reconstructed_total(self) -> float:
        return float(discounted_total(self.loss0, self.refinement_loss))

    def as_dict(self) -> dict:
        return {
            "nll": self.nll,
            "kl": self.kl_per_layer,
            "loss0": self.loss0,
            "refine_nll": self.refinement_nll,
            "refine_kl": self.refinement_kl,
            "refine_loss": self.refinement_loss,
            "delta_norms": self.delta_norms,
            "total": self.total,
        }
