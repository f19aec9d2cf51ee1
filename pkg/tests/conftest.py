import os
import sys

import numpy as np
import pytest
import torch

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from components.vit import build_model
from utils.config import ModelConfig, RunConfig, TrainConfig, DataConfig, ProbeConfig

MODES = ("pilamim", "pixel_only", "latent_only", "pilamim_no_cls")


def tiny_model_config(mode: str = "pilamim", **kwargs) -> ModelConfig:
    """4x4 images, 2px patches: N=4 patches of D_x=12, encoder width 16"""
    values = dict(
        image_size=4, patch_size=2, in_chans=3,
        enc_depth=1, enc_dim=16, enc_heads=2,
        dec_depth=1, dec_dim=16, dec_heads=2,
        mask_ratio=0.5, mode=mode,
    )
    values.update(kwargs)
    return ModelConfig(**values)


def small_run_config(mode: str = "pilamim", epochs: int = 2) -> RunConfig:
    """16px synthetic images, 4x4 grid, a few dozen samples"""
    return RunConfig(
        model=ModelConfig(
            image_size=16, patch_size=4, enc_depth=1, enc_dim=32, enc_heads=2,
            dec_depth=1, dec_dim=16, dec_heads=2, mode=mode,
        ),
        data=DataConfig(seed=3, count=24, image_size=16),
        train=TrainConfig(epochs=epochs, batch_size=8, warmup_epochs=1, checkpoint_every=1),
        probe=ProbeConfig(epochs=3, warmup_epochs=1, batch_size=16),
    )


@pytest.fixture(params=MODES)
def mode(request):
    return request.param


@pytest.fixture
def tiny_model(mode):
    return build_model(tiny_model_config(mode), seed=0, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
