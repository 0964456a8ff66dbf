import numpy as np
import pytest

from eqinv.data import BiasedDatasetSpec, generate


@pytest.fixture(scope="session")
def tiny_spec():
    return BiasedDatasetSpec(num_classes=3, samples_per_class=12, image_side=8, bias_ratio=0.9,
                             seed=7, val_per_class=2, test_per_class=4)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
