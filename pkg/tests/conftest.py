import numpy as np
import pytest

from p2s.imagecore import ImageGrid, concentric_phantom


@pytest.fixture(scope="session")
def phantom128() -> ImageGrid:
    return concentric_phantom(128, 128)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_image(rng: np.random.Generator, h: int, w: int) -> ImageGrid:
    return ImageGrid(rng.uniform(0.0, 1.0, size=(h, w)))
