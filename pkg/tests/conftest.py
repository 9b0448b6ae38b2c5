import numpy as np
import pytest

from cartseg import phantom


@pytest.fixture(scope="session")
def small_benchmark(tmp_path_factory):
    """Shared 4+4+4 mild-gap benchmark with short volumes."""
    out = tmp_path_factory.mktemp("bench")
    src, tgt = phantom.GAP_PRESETS["mild"]
    manifest = phantom.generate_benchmark(4, 4, 7, src, tgt, out, slice_count=6)
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(0)
