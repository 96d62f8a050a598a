import numpy as np
import pytest
import torch

from microfeat.corpus import SyntheticCorpusSpec, default_vocab, generate_synthetic
from microfeat.model import ModelConfig, PretrainModel

TINY_MODEL = {
    "dim": 8,
    "heads": 2,
    "depth_image": 2,
    "depth_text": 1,
    "decoder_depth": 1,
    "patch_side": 8,
    "image_size": [16, 16],
    "max_text_len": 64,
}


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = SyntheticCorpusSpec(num_classes=2, samples_per_class=4,
                               image_size=(16, 16), motif_size=6, patch_side=8, seed=3)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return default_vocab(2)


@pytest.fixture()
def tiny_model(tiny_vocab):
    return PretrainModel(ModelConfig(vocab_size=len(tiny_vocab), **TINY_MODEL), seed=0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
