import numpy as np
import pytest

from ieci.corpus import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_generate(SynthConfig(train_pairs=8, val_pairs=2, test_pairs=4, n_phrases=2, n_regions=3,
                                      dim=8, implicit_fraction=0.5, seed=3))


@pytest.fixture(scope="session")
def small_corpus():
    return synth_generate(SynthConfig(train_pairs=16, val_pairs=0, test_pairs=8, n_phrases=3, n_regions=5,
                                      dim=8, seed=11))
