import numpy as np
import pytest
import torch

from emorl.config import GeneratorPreset, ModelConfig
from emorl.model import build_model

PALETTE6 = [
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 1.0),
]


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        num_slots=3, latent_dim=8, image_height=12, image_width=12,
        sigma_lik=0.3, num_layers=3, likelihood="gaussian",
        prior_variant="reversed_pp", decoder="light", enc_channels=16,
        dec_channels=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return build_model(tiny_model_config())


@pytest.fixture
def tetromino_preset():
    return GeneratorPreset(
        name="tet-test", kind="tetromino", height=24, width=24,
        count_range=(2, 3), allow_overlap=False, background="black",
        cell_size=3, palette=PALETTE6,
    )


@pytest.fixture
def sprite_preset():
    return GeneratorPreset(
        name="sprite-test", kind="sprite", height=24, width=24,
        count_range=(1, 3), allow_overlap=True, background="gray",
        scale_range=(0.2, 0.35),
    )


def random_images(batch, h, w, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, h, w, generator=gen)


def batch_noise(model, batch, num_slots=None, seed=0):
    cfg = model.cfg
    k = num_slots or cfg.num_slots
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(
        batch, cfg.num_layers + 1, k, cfg.latent_dim, generator=gen
    )


def rng_labels(rng: np.random.Generator, n: int, n_labels: int) -> np.ndarray:
    return rng.integers(0, n_labels, size=n)
