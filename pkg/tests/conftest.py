import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import mnist_sample  # noqa: E402


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    cache = os.environ.get("KCN_TEST_CACHE") or tmp_path_factory.mktemp("data")
    return mnist_sample.mnist_root(cache)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
