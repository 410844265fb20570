import numpy as np
import pytest
import skimage.data


@pytest.fixture(scope="session")
def camera():
    """512x512 8-bit test photograph as float64."""
    return skimage.data.camera().astype(np.float64)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
