import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emorl.generative import (
    DecoderOutput,
    PriorNetwork,
    SpatialBroadcastDecoder,
    gaussian_nll,
    mog_nll,
    prior_targets,
)
from emorl.hvae import GaussianParams


def random_decoder_output(b, k, h, w, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(b, k, h, w, generator=gen, dtype=dtype)
    y = torch.rand(b, k, 3, h, w, generator=gen, dtype=dtype)
    return DecoderOutput(pi=torch.softmax(logits, dim=1), y=y)


class TestPriorNetwork:
    def test_head_shapes(self):
        net = PriorNetwork(64)
        assert net.head_mu.weight.shape == (64, 128)
        assert net.head_sigma.weight.shape == (64, 128)
        out = net(torch.randn(2, 5, 64))
        assert out.mu.shape == (2, 5, 64)
        assert (out.sigma > 0).all()

    def test_zero_weights(self):
        net = PriorNetwork(8)
        for p in net.parameters():
            torch.nn.init.zeros_(p)
        out = net(torch.randn(1, 4, 8))
        assert torch.equal(out.mu, torch.zeros(1, 4, 8))
        assert torch.allclose(
            out.sigma, torch.full((1, 4, 8), math.log(2) + 1e-5), atol=1e-7
        )

    def test_slot_permutation_equivariance(self):
        torch.manual_seed(0)
        net = PriorNetwork(8)
        z = torch.randn(2, 5, 8)
        perm = torch.randperm(5)
        a = net(z)
        b = net(z[:, perm])
        assert torch.allclose(a.mu[:, perm], b.mu, atol=1e-7)
        assert torch.allclose(a.sigma[:, perm], b.sigma, atol=1e-7)


class TestPriorTargets:
    def setup_method(self):
        torch.manual_seed(0)
        self.net = PriorNetwork(4)
        self.samples = [torch.randn(1, 2, 4) for _ in range(4)]  # z^0..z^3

    def is_standard(self, g: GaussianParams) -> bool:
        return bool((g.mu == 0).all() and (g.sigma == 1).all())

    def matches_net(self, g: GaussianParams, cond: torch.Tensor) -> bool:
        ref = self.net(cond)
        return torch.allclose(g.mu, ref.mu) and torch.allclose(g.sigma, ref.sigma)

    def test_bottom_up(self):
        t = prior_targets("bottom_up", self.samples, self.net)
        assert len(t.per_layer) == 3
        assert self.is_standard(t.per_layer[0])
        assert self.matches_net(t.per_layer[1], self.samples[1])
        assert self.matches_net(t.per_layer[2], self.samples[2])
        assert self.matches_net(t.refinement, self.samples[2])

    def test_reversed(self):
        t = prior_targets("reversed", self.samples, self.net)
        assert self.matches_net(t.per_layer[0], self.samples[2])
        assert self.matches_net(t.per_layer[1], self.samples[3])
        assert self.is_standard(t.per_layer[2])
        assert self.is_standard(t.refinement)

    def test_reversed_pp(self):
        t = prior_targets("reversed_pp", self.samples, self.net)
        tr = prior_targets("reversed", self.samples, self.net)
        for a, b in zip(t.per_layer, tr.per_layer):
            assert torch.allclose(a.mu, b.mu) and torch.allclose(a.sigma, b.sigma)
        assert self.matches_net(t.refinement, self.samples[2])

    def test_single_layer_reversed_pp_rejected(self):
        with pytest.raises(ValueError, match="at least 2 layers"):
            prior_targets("reversed_pp", self.samples[:2], self.net)

    def test_single_layer_reversed_degenerates_to_standard(self):
        t = prior_targets("reversed", self.samples[:2], self.net)
        assert len(t.per_layer) == 1
        assert self.is_standard(t.per_layer[0])
        assert self.is_standard(t.refinement)

    def test_single_layer_bottom_up(self):
        t = prior_targets("bottom_up", self.samples[:2], self.net)
        assert len(t.per_layer) == 1
        assert self.is_standard(t.per_layer[0])

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown prior variant"):
            prior_targets("sideways", self.samples, self.net)


class TestDecoder:
    def test_standard_geometry(self):
        torch.manual_seed(0)
        dec = SpatialBroadcastDecoder(16, 64, 64, kind="standard", channels=8)
        assert dec.margin == 10
        out = dec(torch.randn(1, 2, 16))
        assert out.pi.shape == (1, 2, 64, 64)
        assert out.y.shape == (1, 2, 3, 64, 64)

    def test_light_geometry(self):
        torch.manual_seed(0)
        dec = SpatialBroadcastDecoder(8, 12, 12, kind="light", channels=8)
        assert dec.margin == 6
        out = dec(torch.randn(2, 3, 8))
        assert out.pi.shape == (2, 3, 12, 12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            SpatialBroadcastDecoder(8, 12, 12, kind="huge")

    def test_mask_simplex(self):
        torch.manual_seed(1)
        dec = SpatialBroadcastDecoder(8, 10, 10, kind="light", channels=8)
        out = dec(torch.randn(2, 4, 8))
        assert ((out.pi.sum(dim=1) - 1).abs() <= 1e-6).all()
        assert ((out.y >= 0) & (out.y <= 1)).all()

    def test_identical_slots_give_uniform_masks(self):
        torch.manual_seed(2)
        dec = SpatialBroadcastDecoder(8, 10, 10, kind="light", channels=8)
        z = torch.randn(1, 1, 8).expand(1, 4, 8)
        out = dec(z)
        assert torch.allclose(out.pi, torch.full_like(out.pi, 0.25), atol=1e-6)

    def test_slot_permutation(self):
        torch.manual_seed(3)
        dec = SpatialBroadcastDecoder(8, 10, 10, kind="light", channels=8)
        z = torch.randn(1, 4, 8)
        perm = torch.randperm(4)
        a = dec(z)
        b = dec(z[:, perm])
        assert torch.allclose(a.pi[:, perm], b.pi, atol=1e-6)
        assert torch.allclose(a.y[:, perm], b.y, atol=1e-6)
        assert ((a.composite() - b.composite()).abs() <= 1e-6).all()


class TestGaussianNll:
    def test_perfect_reconstruction_constant(self):
        h = w = 4
        pi = torch.full((1, 2, h, w), 0.5, dtype=torch.float64)
        y = torch.rand(1, 2, 3, h, w, dtype=torch.float64)
        out = DecoderOutput(pi=pi, y=y)
        x = out.composite()
        m = 3 * h * w
        nll = gaussian_nll(x, out, 0.1)
        expected = (m / 2) * math.log(2 * math.pi * 0.01)
        assert nll.item() == pytest.approx(expected, rel=1e-12)

    def test_residual_scaling_quadratic(self):
        out = random_decoder_output(1, 3, 4, 4)
        x = out.composite()
        base = gaussian_nll(x, out, 0.2)
        resid1 = gaussian_nll(x + 0.01, out, 0.2) - base
        resid2 = gaussian_nll(x + 0.02, out, 0.2) - base
        assert resid2.item() == pytest.approx(4 * resid1.item(), rel=1e-9)

    def test_elementwise_oracle(self):
        out = random_decoder_output(1, 3, 4, 4, seed=7)
        gen = torch.Generator().manual_seed(8)
        x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        sigma = 0.17
        xhat = (out.pi.unsqueeze(2) * out.y).sum(dim=1)
        oracle = 0.0
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    r = float(x[0, c, i, j] - xhat[0, c, i, j])
                    oracle += 0.5 * math.log(2 * math.pi * sigma**2)
                    oracle += r * r / (2 * sigma**2)
        assert gaussian_nll(x, out, sigma).item() == pytest.approx(oracle, abs=1e-6)


class TestMogNll:
    def test_single_component_equals_gaussian(self):
        gen = torch.Generator().manual_seed(0)
        y = torch.rand(1, 1, 3, 4, 4, generator=gen, dtype=torch.float64)
        out = DecoderOutput(pi=torch.ones(1, 1, 4, 4, dtype=torch.float64), y=y)
        x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        a = mog_nll(x, out, 0.1).item()
        b = gaussian_nll(x, out, 0.1).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_identical_components_collapse(self):
        gen = torch.Generator().manual_seed(1)
        y_one = torch.rand(1, 1, 3, 4, 4, generator=gen, dtype=torch.float64)
        y = y_one.expand(1, 3, 3, 4, 4)
        logits = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        out = DecoderOutput(pi=torch.softmax(logits, dim=1), y=y)
        single = DecoderOutput(
            pi=torch.ones(1, 1, 4, 4, dtype=torch.float64), y=y_one
        )
        x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        assert mog_nll(x, out, 0.1).item() == pytest.approx(
            gaussian_nll(x, single, 0.1).item(), rel=1e-12
        )

    def test_naive_oracle(self):
        out = random_decoder_output(1, 3, 4, 4, seed=5)
        gen = torch.Generator().manual_seed(6)
        x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        sigma = 0.1
        oracle = 0.0
        for i in range(4):
            for j in range(4):
                total = 0.0
                for k in range(3):
                    sq = float(((x[0, :, i, j] - out.y[0, k, :, i, j]) ** 2).sum())
                    dens = math.exp(-sq / (2 * sigma**2)) / (
                        (2 * math.pi * sigma**2) ** 1.5
                    )
                    total += float(out.pi[0, k, i, j]) * dens
                oracle -= math.log(total)
        assert mog_nll(x, out, sigma).item() == pytest.approx(oracle, abs=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 500))
    def test_jensen_direction(self, seed):
        # the mixture NLL never exceeds the pi-weighted sum of per-component NLLs
        out = random_decoder_output(1, 3, 4, 4, seed=seed)
        gen = torch.Generator().manual_seed(seed + 1)
        x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        sigma = 0.15
        sq = ((x.unsqueeze(1) - out.y) ** 2).sum(dim=2)
        log_comp = (
            torch.log(out.pi) - 1.5 * math.log(2 * math.pi * sigma**2)
            - sq / (2 * sigma**2)
        )
        upper = -(out.pi * (log_comp - torch.log(out.pi))).sum(dim=1).sum()
        assert mog_nll(x, out, sigma).item() <= upper.item() + 1e-9


class TestNllGradients:
    def finite_diff(self, fn, tensors, eps=1e-6):
        grads = []
        for t in tensors:
            g = torch.zeros_like(t)
            flat = t.reshape(-1)
            gf = g.reshape(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                hi = fn().item()
                flat[idx] = orig - eps
                lo = fn().item()
                flat[idx] = orig
                gf[idx] = (hi - lo) / (2 * eps)
            grads.append(g)
        return grads

    @pytest.mark.parametrize("loss_kind", ["gaussian", "mog"])
    def test_nll_grad_matches_finite_differences(self, loss_kind):
        gen = torch.Generator().manual_seed(3)
        logits = torch.randn(1, 2, 3, 3, generator=gen, dtype=torch.float64)
        y = torch.rand(1, 2, 3, 3, 3, generator=gen, dtype=torch.float64)
        x = torch.rand(1, 3, 3, 3, generator=gen, dtype=torch.float64)
        logits.requires_grad_()
        y.requires_grad_()
        fn = gaussian_nll if loss_kind == "gaussian" else mog_nll

        def compute():
            out = DecoderOutput(pi=torch.softmax(logits, dim=1), y=y)
            return fn(x, out, 0.2).sum()

        loss = compute()
        loss.backward()
        with torch.no_grad():
            fd_logits, fd_y = self.finite_diff(compute, [logits, y])
        for analytic, fd in ((logits.grad, fd_logits), (y.grad, fd_y)):
            denom = fd.abs().clamp(min=1e-4)
            rel = ((analytic - fd).abs() / denom).max().item()
            assert rel <= 1e-4
