import numpy as np
import pytest

from admix.models import Model, ModelSpec, init_weights

SMALL_LAYERS = [
    {"type": "conv", "out": 4, "k": 3, "stride": 1, "pad": 1},
    {"type": "relu"},
    {"type": "avgpool", "k": 2},
    {"type": "conv", "out": 6, "k": 3, "stride": 1, "pad": 0},
    {"type": "relu"},
    {"type": "flatten"},
    {"type": "dense", "out": 5},
]


def small_spec(channels=3, size=8, classes=5):
    return ModelSpec(input_shape=(channels, size, size), layers=SMALL_LAYERS, num_classes=classes, name="small")


def small_model(seed=0, **kw):
    spec = small_spec(**kw)
    return Model(spec, init_weights(spec, seed), name=f"small{seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    return small_model(seed=3)


@pytest.fixture
def tiny_image(rng):
    return rng.random((3, 8, 8)).astype(np.float32)


@pytest.fixture
def tiny_pool(rng):
    from admix.transforms import SamplePool
    images = rng.random((20, 3, 8, 8)).astype(np.float32)
    return SamplePool(images, np.arange(20) % 5)
