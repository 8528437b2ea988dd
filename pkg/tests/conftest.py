import numpy as np
import pytest

from sparsepost.network import Minibatch, NetworkSpec, init_params
from sparsepost.store import fmnist_paths, load_fmnist, resolve_data_dir
from sparsepost.streams import derive_rng


def fmnist_dir():
    d = resolve_data_dir()
    if d is None:
        return None
    for split in ("train", "test"):
        ip, lp = fmnist_paths(d, split)
        if not (ip.exists() and lp.exists()):
            return None
    return d


HAS_FMNIST = fmnist_dir() is not None
needs_fmnist = pytest.mark.skipif(
    not HAS_FMNIST,
    reason=(
        "FMNIST IDX files not found; point SPARSE_POSTERIOR_DATA at a directory "
        "holding train-images-idx3-ubyte, train-labels-idx1-ubyte, "
        "t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte (optionally .gz)"
    ),
)


@pytest.fixture(scope="session")
def fmnist():
    d = fmnist_dir()
    if d is None:
        pytest.skip("FMNIST data not available")
    return load_fmnist(d, "train"), load_fmnist(d, "test")


@pytest.fixture
def tiny_net():
    return NetworkSpec.mlp(4, [6], 3)


@pytest.fixture
def tiny_params(tiny_net):
    return init_params(tiny_net, derive_rng(0, "tiny-params"))


def random_batch(net, n, seed=0):
    rng = derive_rng(seed, "batch")
    x = rng.random((n, net.input_dim))
    y = rng.integers(0, net.num_classes, n)
    return Minibatch(x, y)
