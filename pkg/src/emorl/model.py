"""The full two-stage model: encode, bottom-up inference, decode, refine."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .config import ModelConfig
from .encoder import ImageEncoder
from .generative import (
    DecoderOutput,
    PriorNetwork,
    PriorTargets,
    SpatialBroadcastDecoder,
    gaussian_nll,
    mog_nll,
    prior_targets,
)
from .hvae import BottomUpPosterior, BottomUpTrajectory, GaussianParams
from .objective import (
    GecoState,
    LossBreakdown,
    diag_gaussian_kl,
    discounted_total,
    loss_term,
)
from .refinement import RefinementNetwork, RefinementTrace, StepLoss, run_refinement


@dataclass
class ForwardResult:
    trajectory: BottomUpTrajectory
    stage1_decoded: DecoderOutput | None
    trace: RefinementTrace | None
    targets: PriorTargets | None
    nll0: Tensor | None            # (B,)
    kls: list[Tensor] | None       # per layer, (B,)
    total: Tensor | None           # (B,) discounted training loss

    @property
    def final_posterior(self) -> GaussianParams:
        if self.trace is not None:
            return self.trace.final
        return self.trajectory.final

    @property
    def reconstruction_output(self) -> DecoderOutput:
        """Decoder output describing the final posterior (last refinement
        decode, or the stage-1 decode when no steps ran)."""
        if self.trace is not None and self.trace.final_decoded is not None:
            return self.trace.final_decoded
        return self.stage1_decoded

    def breakdown(self) -> LossBreakdown:
        def m(t: Tensor) -> float:
            return float(t.detach().mean())

        refine = self.trace.losses[1:] if self.trace is not None else []
        return LossBreakdown(
            nll=m(self.nll0),
            kl_per_layer=[m(k) for k in self.kls],
            loss0=m(self.trace.losses[0].loss),
            refinement_nll=[m(s.nll) for s in refine],
            refinement_kl=[m(s.kl) for s in refine],
            refinement_loss=[m(s.loss) for s in refine],
            delta_norms=[m(d) for d in self.trace.delta_norms],
            total=m(self.total),
        )


class EfficientMorl(nn.Module):
    """Hierarchical bottom-up posterior + lightweight iterative refinement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(channels=cfg.enc_channels)
        self.posterior = BottomUpPosterior(
            token_dim=cfg.enc_channels,
            latent_dim=cfg.latent_dim,
            num_layers=cfg.num_layers,
        )
        self.prior = PriorNetwork(cfg.latent_dim)
        self.decoder = SpatialBroadcastDecoder(
            cfg.latent_dim, cfg.image_height, cfg.image_width,
            kind=cfg.decoder, channels=cfg.dec_channels,
        )
        self.refiner = RefinementNetwork(cfg.latent_dim)

    def likelihood_nll(self, images: Tensor, decoded: DecoderOutput) -> Tensor:
        if self.cfg.likelihood == "gaussian":
            return gaussian_nll(images, decoded, self.cfg.sigma_lik)
        return mog_nll(images, decoded, self.cfg.sigma_lik)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def forward(
        self,
        images: Tensor,
        steps: int,
        num_slots: int | None = None,
        noise: Tensor | None = None,
        refine_noise: Tensor | None = None,
        geco: GecoState | None = None,
        generator: torch.Generator | None = None,
        with_loss: bool = True,
    ) -> ForwardResult:
        """Full two-stage inference on a (B, 3, H, W) batch in [0, 1].

        with_loss=False skips all loss/gradient work and is only valid for
        steps=0 (the refinement updates are driven by loss gradients).
        """
        k = num_slots if num_slots is not None else self.cfg.num_slots
        if not with_loss:
            if steps != 0:
                raise ValueError("with_loss=False requires steps=0")
            embedding = self.encoder(images)
            traj = self.posterior(embedding, k, noise=noise, generator=generator)
            decoded = self.decoder(traj.samples[-1])
            return ForwardResult(
                trajectory=traj, stage1_decoded=decoded, trace=None,
                targets=None, nll0=None, kls=None, total=None,
            )

        embedding = self.encoder(images)
        traj = self.posterior(embedding, k, noise=noise, generator=generator)
        decoded0 = self.decoder(traj.samples[-1])
        nll0 = self.likelihood_nll(images, decoded0)
        targets = prior_targets(self.cfg.prior_variant, traj.samples, self.prior)
        kls = [
            diag_gaussian_kl(q, p) for q, p in zip(traj.posteriors, targets.per_layer)
        ]
        kl_total = kls[0]
        for extra in kls[1:]:
            kl_total = kl_total + extra
        loss0 = StepLoss(
            loss=loss_term(nll0, kl_total, geco), nll=nll0, kl=kl_total,
            decoded=decoded0,
        )

        def step_loss(lam: GaussianParams, step_noise: Tensor) -> StepLoss:
            z = lam.sample(step_noise)
            decoded = self.decoder(z)
            nll = self.likelihood_nll(images, decoded)
            kl = diag_gaussian_kl(lam, targets.refinement)
            return StepLoss(
                loss=loss_term(nll, kl, geco), nll=nll, kl=kl, decoded=decoded
            )

        trace = run_refinement(
            self.refiner, traj.final, loss0, steps, step_loss,
            noise=refine_noise, generator=generator,
        )
        total = discounted_total(
            trace.losses[0].loss, [s.loss for s in trace.losses[1:]]
        )
        return ForwardResult(
            trajectory=traj, stage1_decoded=decoded0, trace=trace,
            targets=targets, nll0=nll0, kls=kls, total=total,
        )

    @torch.no_grad()
    def infer(
        self, images: Tensor, steps: int = 0, num_slots: int | None = None,
        generator: torch.Generator | None = None,
    ) -> ForwardResult:
        """Inference-only entry point. steps=0 runs purely bottom-up with a
        single decode; steps>0 locally enables grad for the refinement signal."""
        if steps == 0:
            return self.forward(
                images, 0, num_slots=num_slots, generator=generator, with_loss=False
            )
        with torch.enable_grad():
            return self.forward(
                images, steps, num_slots=num_slots, generator=generator
            )


def build_model(cfg: ModelConfig) -> EfficientMorl:
    return EfficientMorl(cfg)
