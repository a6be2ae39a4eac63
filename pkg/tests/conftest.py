import numpy as np
import pytest
import torch

from flowi2i.codec import Codec, CodecSpec
from flowi2i.model import ModelConfig, Variant, build_model

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        latent_channels=1, latent_size=32, patch_size=8, hidden_dim=32,
        depth=2, heads=4, control_depth=1, variant=Variant.PRIMARY, p_drop=0.1,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def identity_codec():
    return Codec(CodecSpec())


def perturb_parameters(model, scale=0.02, seed=0):
    """Move every parameter off its init so outputs are non-degenerate."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
    return model


def random_image(seed, size=32, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    span = rng.random((size, size))
    return (lo + (hi - lo) * span).astype(np.float32)
