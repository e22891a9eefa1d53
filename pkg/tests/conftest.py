import numpy as np
import pytest

from microscore.image import Micrograph, NeighborhoodSpec, extract_dataset, standardize
from microscore.simulate import generate, preset_spec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ar_image():
    """Standardized 64x64 micrograph from reference model (a)."""
    return standardize(generate(preset_spec("a", 0, seed=7), 64, 64))


@pytest.fixture(scope="session")
def ar_dataset(ar_image):
    return extract_dataset([ar_image], NeighborhoodSpec("non-causal", 2))


def random_micrograph(rng, h, w, id="rand"):
    return standardize(Micrograph(rng.normal(size=(h, w)), id=id))
