import numpy as np
import pytest

from glyphnet.data import synth_glyphs


@pytest.fixture(scope="session")
def tiny_dataset():
    """30 synthetic samples (10 per class), enough for 5-fold plans."""
    return synth_glyphs(10, seed=42)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
