import numpy as np
import pytest
import torch

from octfp import phantom as ph

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """8 identities x 3 impressions of desk-scale phantoms, shared read-only."""
    out = tmp_path_factory.mktemp("phantoms_small")
    return ph.build_phantom_dataset(
        8, 3, ph.PhantomParams(), master_seed=2024, out_dir=out, size=(64, 64))


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
