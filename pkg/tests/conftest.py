import numpy as np
import pytest

from synhomeo.featkit import FeatureVector


def make_feature(rng: np.random.Generator, n_channels: int = 2) -> FeatureVector:
    return FeatureVector(
        rng.standard_normal(6 * n_channels),
        rng.standard_normal(5 * n_channels),
        rng.standard_normal(5 * n_channels),
        n_channels,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
