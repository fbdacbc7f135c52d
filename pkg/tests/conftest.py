import numpy as np
import pytest
import torch

from odgclip.datasets import make_lodo_splits, synth_toy_suite
from odgclip.encoders import make_mock_backend
from odgclip.engine import TrainConfig, build_model
from odgclip.opengen import make_stub_generator

torch.set_num_threads(1)

TOY_CLASS_SPLIT = {"source1": [0, 1, 2, 3], "source2": [0, 1, 2, 3], "target": [0, 1, 2, 3, 4, 5]}


@pytest.fixture(scope="session")
def backend():
    return make_mock_backend(0, d_v=16, d_tok=16, d_t=16)


@pytest.fixture(scope="session")
def small_suite():
    return synth_toy_suite(3, n_domains=3, n_classes=6, n_per_cell=3, image_size=32)


@pytest.fixture(scope="session")
def small_split(small_suite):
    return make_lodo_splits(small_suite, TOY_CLASS_SPLIT)[0]


@pytest.fixture()
def model(backend, small_split):
    return build_model(backend, small_split.augmented_labels, TrainConfig())


@pytest.fixture(scope="session")
def stub():
    return make_stub_generator(0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
