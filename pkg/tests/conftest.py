import numpy as np
import pytest

from lfvit.config import ModelConfig, tiny
from lfvit.weights import init_weights


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny()


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return init_weights(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def geo224_cfg():
    """DeiT-S grid geometry (224 px, 16 px patches) with a narrow model."""
    return ModelConfig(depth=3, dim=24, heads=2, patch=16, image_side=224, classes=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(cfg, seed=0):
    return np.random.default_rng(seed).random((3, cfg.image_side, cfg.image_side), dtype=np.float32)


def varied_batch(cfg, n, seed=1):
    """Random images with per-image contrast so localization confidences spread out."""
    rng = np.random.default_rng(seed)
    return [
        (rng.random((3, cfg.image_side, cfg.image_side), dtype=np.float32) ** rng.uniform(0.2, 5)).astype(np.float32)
        for _ in range(n)
    ]


def sharpened(w, scale=10.0):
    """Scale the classifier head so softmax confidences are not all near 1/n."""
    return w.replace(head_w=w["head_w"] * scale, head_b=w["head_b"] * scale)
