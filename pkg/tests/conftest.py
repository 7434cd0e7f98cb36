import numpy as np
import pytest

from patchcomm import corpus, game


@pytest.fixture(scope="session")
def tiny_corpus():
    """4 classes x 6 images, 64x64 RGB — enough for pipeline tests."""
    return corpus.generate(corpus.CorpusSpec(num_classes=4, samples_per_class=6, seed=11))


@pytest.fixture(scope="session")
def tiny_cfg():
    return game.GameConfig(batch_size=4, epochs=2, warmup_epochs=0,
                           checkpoint_every=1, val_fraction=0.25, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
