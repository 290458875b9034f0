import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpsynth import ImageTensor, LabeledDataset, RngSeed, generate_toy_glyphs


@pytest.fixture
def rng():
    return RngSeed(12345)


@pytest.fixture(scope="session")
def toy_ds():
    return generate_toy_glyphs(40, 10, (8, 8, 1), RngSeed(100))


@pytest.fixture(scope="session")
def small_ds():
    """Tiny random dataset for mechanism-level tests."""
    gen = np.random.default_rng(5)
    pixels = gen.random((30, 6 * 6))
    labels = gen.integers(0, 3, size=30).tolist()
    return LabeledDataset.from_arrays(pixels, labels, 3, (6, 6, 1))


def image_from_flat(values, w=2, h=2, c=1):
    return ImageTensor(width=w, height=h, channels=c, data=np.asarray(values, dtype=float))
