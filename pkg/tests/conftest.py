import numpy as np
import pytest

from axiombench import micronet


@pytest.fixture(scope="session")
def model():
    """Untrained stock-geometry classifier; deterministic from its seed."""
    return micronet.build_classifier(micronet.ArchConfig(), seed=21)


@pytest.fixture(scope="session")
def tiny_arch():
    """Smallest legal geometry, for cheap gradient and training checks."""
    return micronet.ArchConfig(input_shape=(1, 8, 8), conv_channels=(2, 3),
                               dense_units=(6,), num_classes=4)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
