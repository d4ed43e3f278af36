import numpy as np
import pytest
from hypothesis import settings

from mteeg.backbone import BackboneConfig
from mteeg.model import TaskSpec

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # 1 layer, d=8, patches of 16 samples
    return BackboneConfig(d=8, heads=2, layers=1, patch_len=16, conv_channels=4, group_norm_groups=2,
                          conv_kernels=((5, 4), (3, 1), (3, 1)), max_patches=4, max_channels=160)


@pytest.fixture
def small_cfg():
    return BackboneConfig(d=16, heads=2, layers=2, patch_len=32, conv_channels=4, group_norm_groups=2,
                          conv_kernels=((7, 4), (3, 1), (3, 1)), max_patches=8)


@pytest.fixture
def three_tasks():
    return [TaskSpec(1, "bin", 2), TaskSpec(2, "five", 5), TaskSpec(3, "three", 3)]


def randomize_adapters(model, seed=0, scale=0.1):
    """Give every adapter tensor (B included) random non-zero values."""
    r = np.random.default_rng(seed)
    for p in model.adapter_parameters():
        p.data[...] = r.normal(0.0, scale, p.shape)
    return model
