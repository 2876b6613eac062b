import pytest
import torch

from emorl.model import build_model
from emorl.objective import GecoState, discount_weights

from conftest import batch_noise, random_images, tiny_model_config


def make(seed=0, **overrides):
    torch.manual_seed(seed)
    return build_model(tiny_model_config(**overrides))


class TestForward:
    def test_shapes_and_structure(self):
        model = make()
        images = random_images(2, 12, 12)
        out = model(images, steps=2)
        assert len(out.trajectory.posteriors) == 3
        assert out.stage1_decoded.pi.shape == (2, 3, 12, 12)
        assert len(out.trace.posteriors) == 3  # lambda^(L,0..2)
        assert out.total.shape == (2,)
        assert out.final_posterior is out.trace.final

    def test_zero_steps_total_is_loss0(self):
        model = make()
        images = random_images(1, 12, 12)
        out = model(images, steps=0)
        assert torch.allclose(out.total, out.trace.losses[0].loss)
        assert out.final_posterior is out.trajectory.final

    def test_discounted_total_reproducible(self):
        model = make(seed=1)
        images = random_images(2, 12, 12, seed=1)
        out = model(images, steps=3)
        b = out.breakdown()
        assert b.total == pytest.approx(b.reconstructed_total(), rel=1e-5)
        w = discount_weights(3)
        manual = b.loss0 + sum(wi * li for wi, li in zip(w, b.refinement_loss))
        assert b.total == pytest.approx(manual, rel=1e-5)

    def test_refinement_benefit_wiring(self):
        # three refinement losses enter with weights 0.75/0.5/0.25
        model = make(seed=2)
        images = random_images(1, 12, 12, seed=2)
        out = model(images, steps=3)
        weights = discount_weights(3)
        assert weights == [0.75, 0.5, 0.25]
        total = out.trace.losses[0].loss + sum(
            w * s.loss for w, s in zip(weights, out.trace.losses[1:])
        )
        assert torch.allclose(out.total, total, atol=1e-4)

    def test_num_slots_override(self):
        model = make()
        images = random_images(1, 12, 12)
        out = model(images, steps=0, num_slots=6)
        assert out.trajectory.final.mu.shape == (1, 6, 8)
        assert out.stage1_decoded.pi.shape == (1, 6, 12, 12)

    def test_geco_wraps_each_term(self):
        model = make(seed=3)
        images = random_images(1, 12, 12, seed=3)
        noise = batch_noise(model, 1, seed=3)
        rn = torch.randn(1, 1, 3, 8)
        plain = model(images, steps=1, noise=noise, refine_noise=rn)
        geco = GecoState(nll_threshold=10.0)
        wrapped = model(images, steps=1, noise=noise, refine_noise=rn, geco=geco)
        # stage-1 inference is untouched; only the loss surface changes (and
        # with it the gradient signal that drives refinement)
        assert torch.equal(plain.trajectory.final.mu, wrapped.trajectory.final.mu)
        assert torch.equal(plain.nll0, wrapped.nll0)
        assert not torch.allclose(plain.total, wrapped.total)
        expected = wrapped.nll0 * geco.multiplier + sum(
            k for k in wrapped.kls
        ) - geco.multiplier * geco.nll_threshold
        assert torch.allclose(wrapped.trace.losses[0].loss, expected, rtol=1e-5)

    def test_with_loss_false_only_for_zero_steps(self):
        model = make()
        images = random_images(1, 12, 12)
        with pytest.raises(ValueError):
            model(images, steps=1, with_loss=False)
        out = model(images, steps=0, with_loss=False)
        assert out.total is None and out.nll0 is None
        assert out.reconstruction_output is out.stage1_decoded

    def test_likelihood_dispatch(self):
        g = make(likelihood="gaussian")
        m = make(likelihood="mog")
        images = random_images(1, 12, 12)
        torch.manual_seed(0)
        out_g = g(images, steps=0)
        torch.manual_seed(0)
        out_m = m(images, steps=0)
        assert not torch.allclose(out_g.nll0, out_m.nll0)

    def test_gradients_reach_all_parameters(self):
        model = make(seed=4)
        images = random_images(2, 12, 12, seed=4)
        out = model(images, steps=2)
        out.total.mean().backward()
        missing = [
            n for n, p in model.named_parameters()
            if p.grad is None or not torch.isfinite(p.grad).all()
        ]
        assert missing == []

    def test_infer_steps_zero_single_decode(self):
        model = make(seed=5)
        calls = []
        orig = model.decoder.forward

        def counting(z):
            calls.append(z.shape)
            return orig(z)

        model.decoder.forward = counting
        model.infer(random_images(1, 12, 12), steps=0)
        assert len(calls) == 1

    def test_infer_decode_count_grows_with_steps(self):
        model = make(seed=6)
        calls = []
        orig = model.decoder.forward

        def counting(z):
            calls.append(1)
            return orig(z)

        model.decoder.forward = counting
        model.infer(random_images(1, 12, 12), steps=2)
        assert len(calls) == 3  # stage-1 + one per refinement step

    def test_prior_variants_all_run(self):
        for variant in ("bottom_up", "reversed", "reversed_pp"):
            model = make(prior_variant=variant)
            out = model(random_images(1, 12, 12), steps=1)
            assert torch.isfinite(out.total).all()

    def test_final_reconstruction_is_last_decode(self):
        model = make(seed=7)
        images = random_images(1, 12, 12, seed=7)
        out = model(images, steps=2)
        assert out.reconstruction_output is out.trace.losses[-1].decoded
